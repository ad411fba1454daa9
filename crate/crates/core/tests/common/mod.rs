//! Independent reference implementations for the integration tests. They
//! work on nested vectors with explicit loops and share no code with the
//! library beyond reading parameter values.

#![allow(dead_code)]

use mova::adapter::params::{
    AdapterParams, CrossAttention, GatingNet, LayerNormParams, Linear, NormMode, TransformerParams,
};
use mova::numerics::{FeatureMap, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn map_to_rows(f: &FeatureMap) -> Mat {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    (0..h * w)
        .map(|p| (0..c).map(|ch| f.get(ch, p / w, p % w)).collect())
        .collect()
}

pub fn rows_to_flat_chw(rows: &Mat, h: usize, w: usize) -> Vec<f64> {
    let c = rows[0].len();
    let mut out = vec![0.0; c * h * w];
    for (p, row) in rows.iter().enumerate() {
        for (ch, v) in row.iter().enumerate() {
            out[ch * h * w + p] = *v;
        }
    }
    out
}

pub fn tensor_rows(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Align-corners resampling written out per output pixel.
pub fn interpolate(f: &FeatureMap, oh: usize, ow: usize) -> FeatureMap {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let coord = |p: usize, n_in: usize, n_out: usize| -> f64 {
        if n_out == 1 {
            0.0
        } else {
            p as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let sy = coord(y, h, oh);
                let sx = coord(x, w, ow);
                let y0 = (sy.floor() as usize).min(h - 1);
                let x0 = (sx.floor() as usize).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let v = f.get(ch, y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + f.get(ch, y0, x1) * (1.0 - dy) * dx
                    + f.get(ch, y1, x0) * dy * (1.0 - dx)
                    + f.get(ch, y1, x1) * dy * dx;
                data.push(v);
            }
        }
    }
    FeatureMap::new(c, oh, ow, data).unwrap()
}

/// `x·W + b` with W stored fan_in × fan_out.
pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let (fin, fout) = (l.weight.rows(), l.weight.cols());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fin);
            (0..fout)
                .map(|o| {
                    let mut s = 0.0;
                    for i in 0..fin {
                        s += row[i] * l.weight.at2(i, o);
                    }
                    s + l.bias.as_ref().map_or(0.0, |b| b.data()[o])
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn apply(m: &Mat, f: fn(f64) -> f64) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Softmax over the listed entries only.
pub fn subset_softmax(logits: &[f64], subset: &[usize]) -> Vec<f64> {
    let m = subset.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = subset.iter().map(|&j| (logits[j] - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Multi-head attention with every score computed explicitly.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len() / heads;
    let dv = v[0].len() / heads;
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| {
                    let mut s = 0.0;
                    for t in h * d..(h + 1) * d {
                        s += qi[t] * kj[t];
                    }
                    s / (d as f64).sqrt()
                })
                .collect();
            let all: Vec<usize> = (0..k.len()).collect();
            let p = subset_softmax(&scores, &all);
            for c in h * dv..(h + 1) * dv {
                out[i][c] = (0..k.len()).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    out
}

pub fn extract(x: &FeatureMap, expert: &FeatureMap, p: &CrossAttention, heads: usize) -> FeatureMap {
    let (h, w) = (x.height(), x.width());
    let resampled = interpolate(expert, h, w);
    let xr = map_to_rows(x);
    let er = map_to_rows(&resampled);
    let q = linear(&xr, &p.query);
    let k = linear(&er, &p.key);
    let v = linear(&er, &p.value);
    let mixed = attention(&q, &k, &v, heads);
    let y = add(&xr, &linear(&mixed, &p.output));
    FeatureMap::new(x.channels(), h, w, rows_to_flat_chw(&y, h, w)).unwrap()
}

/// Raw pool logits of the gating MLP for one concatenated input.
pub fn gate_logits(input: &[f64], net: &GatingNet) -> Vec<f64> {
    let hidden = apply(&linear(&vec![input.to_vec()], &net.hidden), gelu);
    linear(&hidden, &net.logits).remove(0)
}

pub fn gate(visual: &[f64], text: &[f64], selection: &[usize], net: &GatingNet) -> Vec<f64> {
    let mut input = visual.to_vec();
    input.extend_from_slice(text);
    subset_softmax(&gate_logits(&input, net), selection)
}

pub fn fuse(maps: &[FeatureMap], weights: &[f64]) -> Vec<f64> {
    let n = maps[0].data().len();
    (0..n)
        .map(|i| maps.iter().zip(weights).map(|(m, w)| m.data()[i] * w).sum())
        .collect()
}

fn layer_norm(x: &Mat, p: &LayerNormParams, mode: NormMode) -> Mat {
    if mode == NormMode::Identity {
        return x.clone();
    }
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| p.gamma.data()[i] * (v - mean) / sd + p.beta.data()[i])
                .collect()
        })
        .collect()
}

pub fn transformer(x: &Mat, p: &TransformerParams, heads: usize) -> Mat {
    let q = linear(x, &p.attn_query);
    let k = linear(x, &p.attn_key);
    let v = linear(x, &p.attn_value);
    let attn = linear(&attention(&q, &k, &v, heads), &p.attn_output);
    let u = layer_norm(&add(x, &attn), &p.norm1, p.norm_mode);
    let ffn = linear(&apply(&linear(&u, &p.ffn_in), gelu), &p.ffn_out);
    layer_norm(&add(&u, &ffn), &p.norm2, p.norm_mode)
}

/// The whole adapter along one explicit path. `features[i]` belongs to
/// `selection[i]`.
pub fn adapter(
    base: &FeatureMap,
    features: &[FeatureMap],
    selection: &[usize],
    text: &[f64],
    params: &AdapterParams,
    heads: usize,
) -> Mat {
    let (h, w) = (base.height(), base.width());
    let mut x = map_to_rows(base);
    for block in &params.blocks {
        let fused = if selection.is_empty() {
            x.clone()
        } else {
            let c = x[0].len();
            let xm = FeatureMap::new(c, h, w, rows_to_flat_chw(&x, h, w)).unwrap();
            let visual: Vec<f64> = (0..c)
                .map(|ch| x.iter().map(|r| r[ch]).sum::<f64>() / x.len() as f64)
                .collect();
            let weights = gate(&visual, text, selection, &block.gating);
            let maps: Vec<FeatureMap> = selection
                .iter()
                .zip(features)
                .map(|(&j, f)| extract(&xm, f, &block.extractors[j], heads))
                .collect();
            let flat = fuse(&maps, &weights);
            let fm = FeatureMap::new(c, h, w, flat).unwrap();
            map_to_rows(&fm)
        };
        x = transformer(&fused, &block.transformer, heads);
    }
    for r in &params.reduction {
        let inner = linear(&apply(&linear(&x, &r.fc1), gelu), &r.fc2);
        x = add(&x, &inner);
    }
    let c = x[0].len();
    let mut pooled = Vec::new();
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            pooled.push(
                (0..c)
                    .map(|ch| {
                        let at = |yy: usize, xc: usize| x[yy * w + xc][ch];
                        (at(2 * y, 2 * xx)
                            + at(2 * y, 2 * xx + 1)
                            + at(2 * y + 1, 2 * xx)
                            + at(2 * y + 1, 2 * xx + 1))
                            / 4.0
                    })
                    .collect(),
            );
        }
    }
    let hidden = apply(&linear(&pooled, &params.projector.fc1), gelu);
    linear(&hidden, &params.projector.fc2)
}

/// Brute-force routing set: every expert strictly below base, ascending loss
/// with index tie-break, capped.
pub fn routing_set(base: f64, losses: &[f64], cap: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    let mut remaining: Vec<usize> = (0..losses.len()).filter(|&j| losses[j] < base).collect();
    while picked.len() < cap && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (remaining[i], remaining[best]);
            if losses[a] < losses[b] || (losses[a] == losses[b] && a < b) {
                best = i;
            }
        }
        picked.push(remaining.remove(best));
    }
    picked
}
