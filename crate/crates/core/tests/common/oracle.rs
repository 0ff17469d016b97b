//! Loop-level reimplementations used as independent oracles. Nothing here
//! touches the autodiff graph.
#![allow(dead_code)]

use hdvnet::model::{Elfa, LevelInput, Lfa};
use hdvnet::nn::{DensityAttention, DensityConnected, DensityMlp, Layout, Linear, Mat, Mlp, ParamStore};

pub fn fc(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = store.value(l.w);
    let b = store.value(l.b);
    let (n, fi) = x.dim();
    let fo = w.ncols();
    assert_eq!(fi, w.nrows());
    let mut y = Mat::zeros((n, fo));
    for i in 0..n {
        for o in 0..fo {
            let mut s = b[[0, o]];
            for j in 0..fi {
                s += x[[i, j]] * w[[j, o]];
            }
            y[[i, o]] = s;
        }
    }
    y
}

pub fn ln_leaky(y: &Mat, gamma: &Mat, beta: &Mat) -> Mat {
    let (n, m) = y.dim();
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        let mean = (0..m).map(|j| y[[i, j]]).sum::<f64>() / m as f64;
        let var = (0..m).map(|j| (y[[i, j]] - mean).powi(2)).sum::<f64>() / m as f64;
        for j in 0..m {
            let v = gamma[[0, j]] * (y[[i, j]] - mean) / (var + 1e-6).sqrt() + beta[[0, j]];
            out[[i, j]] = if v > 0.0 { v } else { 0.2 * v };
        }
    }
    out
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Mat) -> Mat {
    ln_leaky(&fc(store, &m.fc, x), store.value(m.gamma), store.value(m.beta))
}

pub fn cols(x: &Mat, r: std::ops::Range<usize>) -> Mat {
    x.slice(ndarray::s![.., r]).to_owned()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).unwrap()
}

/// For each output state `d`, concatenate `S^(d)..S^(a_in)` and
/// apply that state's MLP.
pub fn dmlp_literal(store: &ParamStore, m: &DensityMlp, x: &Mat) -> Mat {
    let lin = &m.layout_in;
    let mut out = Vec::new();
    for d in 0..m.layout_out.count() {
        let parts: Vec<Mat> = (d..lin.count()).map(|j| cols(x, lin.range(j))).collect();
        out.push(mlp(store, &m.blocks[d], &hcat(&parts)));
    }
    hcat(&out)
}

pub fn dc(store: &ParamStore, l: &DensityConnected, x: &Mat) -> Mat {
    let lin = &l.layout_in;
    let mut out = Vec::new();
    for d in 0..l.layout_out.count() {
        let parts: Vec<Mat> = (d..lin.count()).map(|j| cols(x, lin.range(j))).collect();
        out.push(fc(store, &l.blocks[d], &hcat(&parts)));
    }
    hcat(&out)
}

fn softmax_ranges(z: &mut Mat, layout: &Layout) {
    for mut row in z.rows_mut() {
        for d in 0..layout.count() {
            let r = layout.range(d);
            let mx = r.clone().map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = r.clone().map(|c| (row[c] - mx).exp()).sum();
            for c in r {
                row[c] = (row[c] - mx).exp() / s;
            }
        }
    }
}

pub fn attention(store: &ParamStore, a: &DensityAttention, x: &Mat) -> Mat {
    let mut z = dc(store, &a.dc, x);
    softmax_ranges(&mut z, &a.dc.layout_out);
    x * &z
}

/// `[n·k × width]` neighbour rows: gathered features then the position code.
fn neighbourhood(store: &ParamStore, pos: &Mlp, x: &Mat, level: &LevelInput) -> Mat {
    let pe = mlp(store, pos, &level.rel);
    let w = x.ncols();
    let pw = pe.ncols();
    let mut nf = Mat::zeros((level.n * level.k, w + pw));
    for i in 0..level.n {
        for s in 0..level.k {
            let r = i * level.k + s;
            let j = level.neighbors[r];
            for c in 0..w {
                nf[[r, c]] = x[[j, c]];
            }
            for c in 0..pw {
                nf[[r, w + c]] = pe[[r, c]];
            }
        }
    }
    nf
}

fn mean_rows(nf: &Mat, k: usize, weight: impl Fn(usize) -> f64) -> Mat {
    let n = nf.nrows() / k;
    let mut out = Mat::zeros((n, nf.ncols()));
    for i in 0..n {
        for s in 0..k {
            let w = weight(i * k + s);
            for c in 0..nf.ncols() {
                out[[i, c]] += w * nf[[i * k + s, c]];
            }
        }
    }
    out
}

/// A RandLA-style aggregation with no masking at all: dense attention
/// softmax over every feature, mean pooling, plain MLP.
pub fn unmasked_lfa(store: &ParamStore, l: &Lfa, x: &Mat, level: &LevelInput) -> Mat {
    let nf = neighbourhood(store, &l.pos, x, level);
    let att = &l.att.dc.blocks[0];
    let w = store.value(att.w);
    let b = store.value(att.b);
    let mut logits = nf.dot(w);
    logits += b;
    for mut row in logits.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    let gated = &nf * &logits;
    let pooled = mean_rows(&gated, level.k, |_| 1.0 / level.k as f64);
    let m = &l.mix.blocks[0];
    let mut y = pooled.dot(store.value(m.fc.w));
    y += store.value(m.fc.b);
    ln_leaky(&y, store.value(m.gamma), store.value(m.beta))
}

/// ELFA executed line by line, with the mask taken against `current_d`.
pub fn elfa_literal(store: &ParamStore, e: &Elfa, x: &Mat, level: &LevelInput, current_d: u8) -> Mat {
    let k = level.k;
    let nf = neighbourhood(store, &e.pos, x, level);
    // mask ← I_K ≤ I_p
    let mask: Vec<bool> = (0..level.n * k).map(|r| level.states[level.neighbors[r]] <= current_d).collect();
    // NF_exists ← NF * mask
    let mut nf_exists = nf.clone();
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            nf_exists.row_mut(r).fill(0.0);
        }
    }
    // Attention ← FC(NF); NF_original ← NF * Attention
    let nf_original = attention(store, &e.att_original, &nf);
    // NF_original ← DMLP(pooled NF_original)
    let nf_original = dmlp_literal(store, &e.mix_original, &mean_rows(&nf_original, k, |_| 1.0 / k as f64));
    // NF_exists ← μ(NF_exists) over the surviving neighbours
    let alive: Vec<usize> = (0..level.n).map(|i| (0..k).filter(|&s| mask[i * k + s]).count()).collect();
    let nf_exists = mean_rows(&nf_exists, k, |r| {
        let a = alive[r / k];
        if a == 0 {
            0.0
        } else {
            1.0 / a as f64
        }
    });
    // F ← concat(NF_original, NF_exists), subsection by subsection
    let lc = &e.mix_original.layout_out;
    let mut parts = Vec::new();
    for d in 0..lc.count() {
        parts.push(cols(&nf_original, lc.range(d)));
        parts.push(cols(&nf_exists, lc.range(d)));
    }
    let f = hcat(&parts);
    // Attention ← FC(F); F ← F * Attention; F ← DMLP(F)
    let f = attention(store, &e.att, &f);
    dmlp_literal(store, &e.mix, &f)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
