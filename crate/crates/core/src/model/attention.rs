//! Multi-head self-attention and feed-forward builders shared by the
//! space-time classifier and the fusion backbone. Blocks use pre-layer
//! normalization and residual connections; factorized (divided) attention is
//! expressed through boolean masks over a single token matrix, which is
//! mathematically identical to running attention per frame or per patch
//! position.

use std::sync::Arc;

use crate::autodiff::{AttnMask, ParamBind, ParamGroup, ParamSet, Tape, Tensor, ValId};
use crate::error::{CoreError, Result};
use crate::rng::{truncated_normal_vec, SeededRng};

pub const INIT_STD: f64 = 0.02;

/// ParamSet indices for one attention sublayer.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AttnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// ParamSet indices for one feed-forward sublayer.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FfIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

pub fn register_attn(
    ps: &mut ParamSet,
    prefix: &str,
    d: usize,
    group: ParamGroup,
    rng: &mut SeededRng,
) -> AttnIdx {
    let mut weight = |ps: &mut ParamSet, name: &str, rows: usize, cols: usize| {
        let t = Tensor::new(vec![rows, cols], truncated_normal_vec(rng, rows * cols, INIT_STD))
            .expect("sized init");
        ps.register(format!("{prefix}.{name}"), t, group, true)
    };
    let wq = weight(ps, "wq", d, d);
    let wk = weight(ps, "wk", d, d);
    let wv = weight(ps, "wv", d, d);
    let wo = weight(ps, "wo", d, d);
    let mut bias = |ps: &mut ParamSet, name: &str| {
        ps.register(format!("{prefix}.{name}"), Tensor::zeros(vec![1, d]), group, false)
    };
    let bq = bias(ps, "bq");
    let bk = bias(ps, "bk");
    let bv = bias(ps, "bv");
    let bo = bias(ps, "bo");
    let ln_g = ps.register(
        format!("{prefix}.ln_g"),
        Tensor::new(vec![1, d], vec![1.0; d]).expect("sized"),
        group,
        false,
    );
    let ln_b = ps.register(format!("{prefix}.ln_b"), Tensor::zeros(vec![1, d]), group, false);
    AttnIdx { ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo }
}

pub fn register_ff(
    ps: &mut ParamSet,
    prefix: &str,
    d: usize,
    expansion: usize,
    group: ParamGroup,
    rng: &mut SeededRng,
) -> FfIdx {
    let hidden = d * expansion;
    let w1 = ps.register(
        format!("{prefix}.w1"),
        Tensor::new(vec![hidden, d], truncated_normal_vec(rng, hidden * d, INIT_STD))
            .expect("sized"),
        group,
        true,
    );
    let b1 = ps.register(format!("{prefix}.b1"), Tensor::zeros(vec![1, hidden]), group, false);
    let w2 = ps.register(
        format!("{prefix}.w2"),
        Tensor::new(vec![d, hidden], truncated_normal_vec(rng, d * hidden, INIT_STD))
            .expect("sized"),
        group,
        true,
    );
    let b2 = ps.register(format!("{prefix}.b2"), Tensor::zeros(vec![1, d]), group, false);
    let ln_g = ps.register(
        format!("{prefix}.ln_g"),
        Tensor::new(vec![1, d], vec![1.0; d]).expect("sized"),
        group,
        false,
    );
    let ln_b = ps.register(format!("{prefix}.ln_b"), Tensor::zeros(vec![1, d]), group, false);
    FfIdx { ln_g, ln_b, w1, b1, w2, b2 }
}

/// Optional low-rank adapter attached to one projection: the projection
/// becomes `x @ W0^T + (alpha/r) * (x @ A^T) @ B^T`.
#[derive(Debug, Clone, Copy)]
pub struct LoraIds {
    pub a: ValId,
    pub b: ValId,
    pub scale: f64,
}

/// Adapters per attention projection; `None` leaves a projection untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnAdapters {
    pub q: Option<LoraIds>,
    pub k: Option<LoraIds>,
    pub v: Option<LoraIds>,
    pub o: Option<LoraIds>,
}

fn project(tape: &mut Tape, xn: ValId, w: ValId, b: ValId, adapter: Option<&LoraIds>) -> ValId {
    let base = tape.matmul_tb(xn, w);
    let with_delta = match adapter {
        Some(l) => {
            let down = tape.matmul_tb(xn, l.a);
            let up = tape.matmul_tb(down, l.b);
            let scaled = tape.scale(up, l.scale);
            tape.add(base, scaled)
        }
        None => base,
    };
    tape.add_row(with_delta, b)
}

/// Pre-norm residual multi-head self-attention over the rows of `x`.
pub(crate) fn mhsa_ids(
    tape: &mut Tape,
    x: ValId,
    idx: &AttnIdx,
    bind: &ParamBind,
    n_heads: usize,
    mask: Option<Arc<AttnMask>>,
    adapters: &AttnAdapters,
) -> ValId {
    let (_, d) = tape.dims(x);
    assert_eq!(d % n_heads, 0, "d={d} not divisible by n_heads={n_heads}");
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let xn = tape.layer_norm(x, bind.id(idx.ln_g), bind.id(idx.ln_b));
    let q = project(tape, xn, bind.id(idx.wq), bind.id(idx.bq), adapters.q.as_ref());
    let k = project(tape, xn, bind.id(idx.wk), bind.id(idx.bk), adapters.k.as_ref());
    let v = project(tape, xn, bind.id(idx.wv), bind.id(idx.bv), adapters.v.as_ref());

    let mut head_outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_tb(qh, kh);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled, mask.clone());
        head_outputs.push(tape.matmul(probs, vh));
    }
    let ctx = if n_heads == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    let out = project(tape, ctx, bind.id(idx.wo), bind.id(idx.bo), adapters.o.as_ref());
    tape.add(x, out)
}

/// Pre-norm residual feed-forward sublayer with a GELU hidden activation.
pub(crate) fn feed_forward_ids(tape: &mut Tape, x: ValId, idx: &FfIdx, bind: &ParamBind) -> ValId {
    let xn = tape.layer_norm(x, bind.id(idx.ln_g), bind.id(idx.ln_b));
    let h = tape.matmul_tb(xn, bind.id(idx.w1));
    let h = tape.add_row(h, bind.id(idx.b1));
    let h = tape.gelu(h);
    let y = tape.matmul_tb(h, bind.id(idx.w2));
    let y = tape.add_row(y, bind.id(idx.b2));
    tape.add(x, y)
}

/// Spatial-stage mask: token `(t, j)` attends within frame `t`. With
/// `with_cls` a leading row/column attends and is attended by everything.
pub fn spatial_mask(t: usize, n_p: usize, with_cls: bool) -> AttnMask {
    divided_mask(t, n_p, with_cls, |ti, _ji, tj, _jj| ti == tj)
}

/// Temporal-stage mask: token `(t, j)` attends across frames at patch
/// position `j`.
pub fn temporal_mask(t: usize, n_p: usize, with_cls: bool) -> AttnMask {
    divided_mask(t, n_p, with_cls, |_ti, ji, _tj, jj| ji == jj)
}

fn divided_mask(
    t: usize,
    n_p: usize,
    with_cls: bool,
    allow_pair: impl Fn(usize, usize, usize, usize) -> bool,
) -> AttnMask {
    let base = t * n_p;
    let n = base + usize::from(with_cls);
    let off = usize::from(with_cls);
    let mut allow = vec![false; n * n];
    if with_cls {
        for j in 0..n {
            allow[j] = true; // CLS row attends everywhere
        }
        for i in 0..n {
            allow[i * n] = true; // everything attends to CLS
        }
    }
    for i in 0..base {
        for j in 0..base {
            if allow_pair(i / n_p, i % n_p, j / n_p, j % n_p) {
                allow[(i + off) * n + (j + off)] = true;
            }
        }
    }
    AttnMask { n, allow }
}

/// Plain-weight carrier for the standalone attention entry point.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl AttnWeights {
    pub fn init(d: usize, rng: &mut SeededRng) -> Self {
        let w = |rng: &mut SeededRng| {
            Tensor::new(vec![d, d], truncated_normal_vec(rng, d * d, INIT_STD)).expect("sized")
        };
        AttnWeights {
            wq: w(rng),
            wk: w(rng),
            wv: w(rng),
            wo: w(rng),
            bq: Tensor::zeros(vec![1, d]),
            bk: Tensor::zeros(vec![1, d]),
            bv: Tensor::zeros(vec![1, d]),
            bo: Tensor::zeros(vec![1, d]),
            ln_gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("sized"),
            ln_bias: Tensor::zeros(vec![1, d]),
        }
    }

    /// Identity value/output path with zero query/key weights.
    pub fn identity_value(d: usize) -> Self {
        let eye = {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], m).expect("sized")
        };
        AttnWeights {
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: eye.clone(),
            wo: eye,
            bq: Tensor::zeros(vec![1, d]),
            bk: Tensor::zeros(vec![1, d]),
            bv: Tensor::zeros(vec![1, d]),
            bo: Tensor::zeros(vec![1, d]),
            ln_gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("sized"),
            ln_bias: Tensor::zeros(vec![1, d]),
        }
    }

    fn register(&self, ps: &mut ParamSet) -> AttnIdx {
        let mut reg = |name: &str, t: &Tensor, decay: bool| {
            ps.register(format!("mhsa.{name}"), t.clone(), ParamGroup::Backbone, decay)
        };
        AttnIdx {
            wq: reg("wq", &self.wq, true),
            bq: reg("bq", &self.bq, false),
            wk: reg("wk", &self.wk, true),
            bk: reg("bk", &self.bk, false),
            wv: reg("wv", &self.wv, true),
            bv: reg("bv", &self.bv, false),
            wo: reg("wo", &self.wo, true),
            bo: reg("bo", &self.bo, false),
            ln_g: reg("ln_g", &self.ln_gain, false),
            ln_b: reg("ln_b", &self.ln_bias, false),
        }
    }
}

/// Standalone pre-norm residual multi-head self-attention over `tokens`
/// (`[n_tokens, d]`). Output shape equals input shape.
pub fn mhsa(tokens: &Tensor, weights: &AttnWeights, n_heads: usize) -> Result<Tensor> {
    let (n, d) = tokens.matrix_dims()?;
    if d % n_heads != 0 || n_heads == 0 {
        return Err(CoreError::Dimension(format!(
            "embedding width {d} not divisible by {n_heads} heads"
        )));
    }
    let (wr, wc) = weights.wq.matrix_dims()?;
    if (wr, wc) != (d, d) {
        return Err(CoreError::Dimension(format!(
            "projection weights must be [{d} x {d}], got [{wr} x {wc}]"
        )));
    }
    tokens.ensure_finite("mhsa input tokens")?;

    let mut ps = ParamSet::new();
    let idx = weights.register(&mut ps);
    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape);
    let x = tape.constant(n, d, tokens.data.clone());
    let out = mhsa_ids(&mut tape, x, &idx, &bind, n_heads, None, &AttnAdapters::default());
    let result = Tensor::new(vec![n, d], tape.value(out).to_vec())?;
    result.ensure_finite("mhsa output")?;
    Ok(result)
}

/// One divided space-time block over `[t * n_p, d]` tokens: spatial
/// attention within each frame, temporal attention within each patch
/// position, then the feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub spatial: AttnWeights,
    pub temporal: AttnWeights,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ff_ln_gain: Tensor,
    pub ff_ln_bias: Tensor,
}

impl BlockWeights {
    pub fn init(d: usize, expansion: usize, rng: &mut SeededRng) -> Self {
        let hidden = d * expansion;
        BlockWeights {
            spatial: AttnWeights::init(d, rng),
            temporal: AttnWeights::init(d, rng),
            ff_w1: Tensor::new(vec![hidden, d], truncated_normal_vec(rng, hidden * d, INIT_STD))
                .expect("sized"),
            ff_b1: Tensor::zeros(vec![1, hidden]),
            ff_w2: Tensor::new(vec![d, hidden], truncated_normal_vec(rng, d * hidden, INIT_STD))
                .expect("sized"),
            ff_b2: Tensor::zeros(vec![1, d]),
            ff_ln_gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("sized"),
            ff_ln_bias: Tensor::zeros(vec![1, d]),
        }
    }
}

pub fn divided_block(
    tokens: &Tensor,
    block: &BlockWeights,
    n_heads: usize,
    t: usize,
    n_p: usize,
) -> Result<Tensor> {
    let (n, d) = tokens.matrix_dims()?;
    if n != t * n_p {
        return Err(CoreError::Dimension(format!(
            "token count {n} does not equal t*n_p = {}",
            t * n_p
        )));
    }
    tokens.ensure_finite("divided_block input")?;

    let mut ps = ParamSet::new();
    let s_idx = block.spatial.register(&mut ps);
    // second registration needs distinct names
    let t_idx = {
        let mut reg = |name: &str, tsr: &Tensor, decay: bool| {
            ps.register(format!("temporal.{name}"), tsr.clone(), ParamGroup::Backbone, decay)
        };
        AttnIdx {
            wq: reg("wq", &block.temporal.wq, true),
            bq: reg("bq", &block.temporal.bq, false),
            wk: reg("wk", &block.temporal.wk, true),
            bk: reg("bk", &block.temporal.bk, false),
            wv: reg("wv", &block.temporal.wv, true),
            bv: reg("bv", &block.temporal.bv, false),
            wo: reg("wo", &block.temporal.wo, true),
            bo: reg("bo", &block.temporal.bo, false),
            ln_g: reg("ln_g", &block.temporal.ln_gain, false),
            ln_b: reg("ln_b", &block.temporal.ln_bias, false),
        }
    };
    let ff_idx = {
        let mut reg = |name: &str, tsr: &Tensor, decay: bool| {
            ps.register(format!("ff.{name}"), tsr.clone(), ParamGroup::Backbone, decay)
        };
        FfIdx {
            w1: reg("w1", &block.ff_w1, true),
            b1: reg("b1", &block.ff_b1, false),
            w2: reg("w2", &block.ff_w2, true),
            b2: reg("b2", &block.ff_b2, false),
            ln_g: reg("ln_g", &block.ff_ln_gain, false),
            ln_b: reg("ln_b", &block.ff_ln_bias, false),
        }
    };

    let mut tape = Tape::new();
    let bind = ps.bind(&mut tape);
    let x = tape.constant(n, d, tokens.data.clone());
    let s_mask = Arc::new(spatial_mask(t, n_p, false));
    let t_mask = Arc::new(temporal_mask(t, n_p, false));
    let h = mhsa_ids(&mut tape, x, &s_idx, &bind, n_heads, Some(s_mask), &AttnAdapters::default());
    let h = mhsa_ids(&mut tape, h, &t_idx, &bind, n_heads, Some(t_mask), &AttnAdapters::default());
    let out = feed_forward_ids(&mut tape, h, &ff_idx, &bind);
    Tensor::new(vec![n, d], tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn layer_norm_row(row: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.iter().map(|&v| (v - mean) * inv).collect()
    }

    #[test]
    fn single_token_identity_value_is_residual_plus_normalized_token() {
        // With zero query/key weights, identity value and output projections,
        // softmax over one token is 1, so out = x + LN(x).
        let d = 6;
        let x = Tensor::new(vec![1, d], vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.2]).unwrap();
        let out = mhsa(&x, &AttnWeights::identity_value(d), 2).unwrap();
        let expected: Vec<f64> = layer_norm_row(&x.data)
            .iter()
            .zip(&x.data)
            .map(|(n, x)| x + n)
            .collect();
        for (o, e) in out.data.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_produce_identical_rows() {
        let d = 8;
        let mut rng = substream(3, "mhsa-sym");
        let w = AttnWeights::init(d, &mut rng);
        let row: Vec<f64> = (0..d).map(|i| (i as f64) * 0.25 - 0.8).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let tokens = Tensor::new(vec![2, d], data).unwrap();
        let out = mhsa(&tokens, &w, 2).unwrap();
        assert_eq!(out.data[..d], out.data[d..]);
    }

    #[test]
    fn output_shape_matches_and_nonfinite_is_rejected() {
        let d = 4;
        let w = AttnWeights::identity_value(d);
        let ok = Tensor::new(vec![3, d], vec![0.1; 12]).unwrap();
        assert_eq!(mhsa(&ok, &w, 2).unwrap().shape, vec![3, d]);
        let bad = Tensor::new(vec![1, d], vec![f64::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(mhsa(&bad, &w, 2), Err(CoreError::Numeric(_))));
        assert!(matches!(mhsa(&ok, &w, 3), Err(CoreError::Dimension(_))));
    }

    /// Dense reference attention: explicit loops, no fused ops, no masks.
    fn naive_mhsa(tokens: &[Vec<f64>], w: &AttnWeights, n_heads: usize) -> Vec<Vec<f64>> {
        let n = tokens.len();
        let d = tokens[0].len();
        let dh = d / n_heads;
        let normed: Vec<Vec<f64>> = tokens.iter().map(|r| layer_norm_row(r)).collect();
        let proj = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..d)
                .map(|o| {
                    let mut acc = b.data[o];
                    for i in 0..d {
                        acc += w.data[o * d + i] * x[i];
                    }
                    acc
                })
                .collect()
        };
        let q: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &w.wq, &w.bq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &w.wk, &w.bk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &w.wv, &w.bv)).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let mut scores = Vec::with_capacity(n);
                for j in 0..n {
                    let mut s = 0.0;
                    for c in cols.clone() {
                        s += q[i][c] * k[j][c];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..n {
                    let p = exps[j] / sum;
                    for c in cols.clone() {
                        ctx[i][c] += p * v[j][c];
                    }
                }
            }
        }
        (0..n)
            .map(|i| {
                let o = proj(&ctx[i], &w.wo, &w.bo);
                (0..d).map(|c| tokens[i][c] + o[c]).collect()
            })
            .collect()
    }

    #[test]
    fn random_case_matches_naive_dense_oracle() {
        let d = 8;
        let n = 4;
        let mut rng = substream(11, "mhsa-oracle");
        let w = AttnWeights::init(d, &mut rng);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|i| (0..d).map(|j| ((i * d + j) as f64 * 0.37).sin()).collect()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let tokens = Tensor::new(vec![n, d], flat).unwrap();
        let got = mhsa(&tokens, &w, 2).unwrap();
        let want = naive_mhsa(&rows, &w, 2);
        for i in 0..n {
            for j in 0..d {
                assert!(
                    (got.data[i * d + j] - want[i][j]).abs() < 1e-10,
                    "({i},{j}): {} vs {}",
                    got.data[i * d + j],
                    want[i][j]
                );
            }
        }
    }
}
