//! Forward pass with cached activations and exact reverse-mode gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use statrs::function::erf::erf;

use super::{ModelConfig, ModelError, ModelParams};
use crate::geometry::BinaryImage;

const LN_EPS: f64 = 1e-6;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Per-sample gradients are summed in groups of this size; the sum itself is
/// always taken in sample order.
const GRAD_CHUNK: usize = 8;

/// Output of [`forward`]: the scalar prediction and, per layer, one
/// `tokens × tokens` attention matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: f64,
    pub attention: Vec<Vec<Array2<f64>>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-major patches, each flattened channel-major (`c, row, col`), the
/// order of a flattened convolution kernel. The single binary channel is
/// repeated for every input channel.
pub fn patchify(cfg: &ModelConfig, image: &BinaryImage) -> Result<Array2<f64>, ModelError> {
    if image.width() != cfg.image_size || image.height() != cfg.image_size {
        return Err(ModelError::Shape {
            expected: vec![cfg.image_size, cfg.image_size],
            found: vec![image.height(), image.width()],
        });
    }
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for pr in 0..g {
        for pc in 0..g {
            let mut row = out.row_mut(pr * g + pc);
            for c in 0..cfg.in_channels {
                for i in 0..p {
                    for j in 0..p {
                        let v = image.get(pr * p + i, pc * p + j) as u8 as f64;
                        row[c * p * p + i * p + j] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: ArrayView2<f64>, w: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * w + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &Array2<f64>,
    cache: &LnCache,
    w: &Array1<f64>,
    dw: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * w;
    for ((mut row, xhat), &rstd) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.rstd)
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &xh) in row.iter_mut().zip(xhat) {
            *v = rstd * (*v - mean_d - xh * mean_dx);
        }
    }
    dx
}

fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: LnCache,
    z: Array1<f64>,
    hidden_pre: Option<Array1<f64>>,
    head_in: Array1<f64>,
}

fn check_finite(x: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer: layer() })
    }
}

fn forward_cached(
    params: &ModelParams,
    cfg: &ModelConfig,
    patches: Array2<f64>,
) -> Result<(f64, Cache), ModelError> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let emb = linear(patches.view(), &params.patch_w, &params.patch_b);
    let mut x = Array2::zeros((cfg.tokens(), d));
    x.row_mut(0).assign(&params.cls);
    x.slice_mut(s![1.., ..]).assign(&emb);
    x += &params.pos;
    check_finite(&x, || "patch_embed".into())?;

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (li, bp) in params.blocks.iter().enumerate() {
        let (h1, ln1) = layer_norm(x.view(), &bp.norm1_w, &bp.norm1_b);
        let q = linear(h1.view(), &bp.q_w, &bp.q_b);
        let k = linear(h1.view(), &bp.k_w, &bp.k_b);
        let v = linear(h1.view(), &bp.v_w, &bp.v_b);
        let mut ctx = Array2::zeros((cfg.tokens(), d));
        let mut attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let x_mid = &x + &linear(ctx.view(), &bp.proj_w, &bp.proj_b);
        let (h2, ln2) = layer_norm(x_mid.view(), &bp.norm2_w, &bp.norm2_b);
        let u = linear(h2.view(), &bp.fc1_w, &bp.fc1_b);
        let g = u.mapv(gelu);
        let x_out = &x_mid + &linear(g.view(), &bp.fc2_w, &bp.fc2_b);
        check_finite(&x_out, || format!("block {li}"))?;
        x = x_out;
        blocks.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            h2,
            u,
            g,
        });
    }

    // only the class token reaches the head
    let (z, norm) = layer_norm(x.slice(s![0..1, ..]), &params.norm_w, &params.norm_b);
    let z = z.row(0).to_owned();
    let (hidden_pre, head_in) = match &params.head_hidden {
        Some((w, b)) => {
            let pre = z.dot(w) + b;
            let act = pre.mapv(gelu);
            (Some(pre), act)
        }
        None => (None, z.clone()),
    };
    let y = head_in.dot(&params.head_w.column(0)) + params.head_b[0];
    if !y.is_finite() {
        return Err(ModelError::NonFinite {
            layer: "head".into(),
        });
    }
    Ok((
        y,
        Cache {
            patches,
            blocks,
            norm,
            z,
            hidden_pre,
            head_in,
        },
    ))
}

/// Prediction and attention maps for one image.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &BinaryImage,
) -> Result<ForwardOutput, ModelError> {
    let (output, cache) = forward_cached(params, cfg, patchify(cfg, image)?)?;
    Ok(ForwardOutput {
        output,
        attention: cache.blocks.into_iter().map(|b| b.attn).collect(),
    })
}

/// Prediction only.
pub fn predict_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &BinaryImage,
) -> Result<f64, ModelError> {
    Ok(forward_cached(params, cfg, patchify(cfg, image)?)?.0)
}

/// Adds `dy * d(output)/d(params)` into `grads`.
fn backward_cached(
    params: &ModelParams,
    cfg: &ModelConfig,
    cache: &Cache,
    dy: f64,
    grads: &mut ModelParams,
) {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    grads.head_b[0] += dy;
    grads
        .head_w
        .column_mut(0)
        .scaled_add(dy, &cache.head_in);
    let d_head_in = params.head_w.column(0).to_owned() * dy;
    let dz = match (&params.head_hidden, &mut grads.head_hidden, &cache.hidden_pre) {
        (Some((w, _)), Some((gw, gb)), Some(pre)) => {
            let dpre = &d_head_in * &pre.mapv(gelu_grad);
            *gw += &outer(cache.z.view(), dpre.view());
            *gb += &dpre;
            w.dot(&dpre)
        }
        _ => d_head_in,
    };

    let dz = dz.insert_axis(Axis(0));
    let dx0 = layer_norm_back(&dz, &cache.norm, &params.norm_w, &mut grads.norm_w, &mut grads.norm_b);
    let mut dx = Array2::zeros((cfg.tokens(), d));
    dx.row_mut(0).assign(&dx0.row(0));

    for ((bp, bg), c) in params
        .blocks
        .iter()
        .zip(grads.blocks.iter_mut())
        .zip(&cache.blocks)
        .rev()
    {
        // MLP branch
        bg.fc2_b += &dx.sum_axis(Axis(0));
        bg.fc2_w += &c.g.t().dot(&dx);
        let dg = dx.dot(&bp.fc2_w.t());
        let du = &dg * &c.u.mapv(gelu_grad);
        bg.fc1_b += &du.sum_axis(Axis(0));
        bg.fc1_w += &c.h2.t().dot(&du);
        let dh2 = du.dot(&bp.fc1_w.t());
        let dx_mid = &dx + &layer_norm_back(&dh2, &c.ln2, &bp.norm2_w, &mut bg.norm2_w, &mut bg.norm2_b);

        // attention branch
        bg.proj_b += &dx_mid.sum_axis(Axis(0));
        bg.proj_w += &c.ctx.t().dot(&dx_mid);
        let dctx = dx_mid.dot(&bp.proj_w.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let mut ds = &da * a;
            for (mut row, arow) in ds.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                let dot = row.sum();
                row.zip_mut_with(&arow, |v, &p| *v -= p * dot);
            }
            // softmax backward is A * (dA - rowsum(A * dA)); the score scale
            // comes last
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        bg.q_b += &dq.sum_axis(Axis(0));
        bg.k_b += &dk.sum_axis(Axis(0));
        bg.v_b += &dv.sum_axis(Axis(0));
        bg.q_w += &c.h1.t().dot(&dq);
        bg.k_w += &c.h1.t().dot(&dk);
        bg.v_w += &c.h1.t().dot(&dv);
        let dh1 = dq.dot(&bp.q_w.t()) + dk.dot(&bp.k_w.t()) + dv.dot(&bp.v_w.t());
        dx = dx_mid + layer_norm_back(&dh1, &c.ln1, &bp.norm1_w, &mut bg.norm1_w, &mut bg.norm1_b);
    }

    grads.pos += &dx;
    grads.cls += &dx.row(0);
    let demb = dx.slice(s![1.., ..]);
    grads.patch_b += &demb.sum_axis(Axis(0));
    grads.patch_w += &cache.patches.t().dot(&demb);
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Mean squared error over the batch and its exact gradient. Samples are
/// processed in parallel; their gradients are summed in batch order so the
/// result does not depend on the thread count.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(BinaryImage, f64)],
) -> Result<(f64, ModelParams), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = ModelParams::zeros(cfg);
    let mut loss = 0.0;
    for chunk in batch.chunks(GRAD_CHUNK) {
        let parts = chunk
            .par_iter()
            .map(|(image, label)| {
                let (pred, cache) = forward_cached(params, cfg, patchify(cfg, image)?)?;
                let err = pred - label;
                let mut g = ModelParams::zeros(cfg);
                backward_cached(params, cfg, &cache, 2.0 * err / n, &mut g);
                Ok((err * err, g))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        for (sq, g) in parts {
            loss += sq;
            grads.add_scaled(&g, 1.0);
        }
    }
    Ok((loss / n, grads))
}
