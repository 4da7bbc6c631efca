//! Operator blocks and downsampling modules against straight-line
//! reference forwards written on plain slices.

mod common;

use common::{naive_conv2d, rand_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uninas_core::dsm::{Dsm, DsmKind, DsmParams};
use uninas_core::gops::{BlockParams, GopBlock, GopKind, TransformerBlock};
use uninas_core::nn::{Builder, BN_EPS, LN_EPS};
use uninas_core::params::{Ctx, Initializer, Mode, ParamStore};
use uninas_core::tensor::{Tape, Tensor};

const TOL: f64 = 1e-10;

/// Randomise every norm/bias parameter and running statistic so that the
/// references exercise them.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let lo = if name.ends_with("running_var") || (name.contains("norm") || name.contains("bn")) && name.ends_with("weight") {
            0.5
        } else if name.ends_with("bias") || name.ends_with("running_mean") {
            -0.3
        } else {
            continue;
        };
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(lo..lo + 1.0);
        }
    }
}

fn get(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

fn tensor(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.find(name).unwrap()).clone()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `rows × in` times `[in, out]` plus bias.
fn linear(x: &[f64], rows: usize, w: &[f64], b: Option<&[f64]>, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..inp {
                acc += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = acc;
        }
    }
    y
}

fn layer_norm(x: &[f64], width: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        y.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]));
    }
    y
}

/// Eval-mode batch norm on `[B, C, H, W]` data.
fn bn_eval(x: &mut [f64], channels: usize, plane: usize, store: &ParamStore, prefix: &str) {
    let (g, b) = (get(store, &format!("{prefix}.weight")), get(store, &format!("{prefix}.bias")));
    let (m, v) = (get(store, &format!("{prefix}.running_mean")), get(store, &format!("{prefix}.running_var")));
    for (i, val) in x.iter_mut().enumerate() {
        let c = (i / plane) % channels;
        *val = (*val - m[c]) / (v[c] + BN_EPS).sqrt() * g[c] + b[c];
    }
}

fn conv(x: &[f64], shape: [usize; 4], w: &Tensor, stride: usize, groups: usize) -> Vec<f64> {
    let xt = Tensor::new(shape.to_vec(), x.to_vec()).unwrap();
    naive_conv2d(&xt, w, (stride, stride), (1, 1), groups).into_data()
}

/// Attention of query rows over key/value rows, `heads` heads of width 32.
fn attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, c: usize) -> Vec<f64> {
    let d = 32;
    let mut out = vec![0.0; nq * c];
    for h in 0..c / d {
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i * c + h * d + t] = (0..nk).map(|j| e[j] / z * v[j * c + h * d + t]).sum();
            }
        }
    }
    out
}

fn ffn(x: &[f64], rows: usize, c: usize, hidden: usize, store: &ParamStore, prefix: &str) -> Vec<f64> {
    let h = linear(
        x,
        rows,
        &get(store, &format!("{prefix}.fc1.weight")),
        Some(&get(store, &format!("{prefix}.fc1.bias"))),
        c,
        hidden,
    );
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    linear(
        &h,
        rows,
        &get(store, &format!("{prefix}.fc2.weight")),
        Some(&get(store, &format!("{prefix}.fc2.bias"))),
        hidden,
        c,
    )
}

/// `[N, c]` tokens of one image to a `[1, c, H, W]` grid and back.
fn to_grid(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            g[ch * n + t] = x[t * c + ch];
        }
    }
    g
}

fn from_grid(g: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut x = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            x[t * c + ch] = g[ch * n + t];
        }
    }
    x
}

fn windows(h: usize, w: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for bi in 0..h.div_ceil(size) {
        for bj in 0..w.div_ceil(size) {
            let mut idx = Vec::new();
            for i in bi * size..((bi + 1) * size).min(h) {
                for j in bj * size..((bj + 1) * size).min(w) {
                    idx.push(i * w + j);
                }
            }
            out.push(idx);
        }
    }
    out
}

fn reference_transformer(x: &[f64], hw: (usize, usize), c: usize, e: usize, window: Option<usize>, store: &ParamStore) -> Vec<f64> {
    let n = hw.0 * hw.1;
    let mut out = Vec::new();
    for img in x.chunks(n * c) {
        let grid = to_grid(img, n, c);
        let mut pe = conv(&grid, [1, c, hw.0, hw.1], &tensor(store, "cpe.weight"), 1, c);
        let pb = get(store, "cpe.bias");
        for (i, v) in pe.iter_mut().enumerate() {
            *v += pb[i / n];
        }
        let pe = from_grid(&pe, n, c);
        let x1: Vec<f64> = img.iter().zip(&pe).map(|(a, b)| a + b).collect();
        let t = layer_norm(&x1, c, &get(store, "norm1.weight"), &get(store, "norm1.bias"));
        let qkv = linear(&t, n, &get(store, "attn.qkv.weight"), Some(&get(store, "attn.qkv.bias")), c, 3 * c);
        let part = |rows: &[usize], off: usize| -> Vec<f64> {
            rows.iter().flat_map(|&r| qkv[r * 3 * c + off..r * 3 * c + off + c].to_vec()).collect()
        };
        let groups = match window {
            Some(ws) if hw.0 > ws || hw.1 > ws => windows(hw.0, hw.1, ws),
            _ => vec![(0..n).collect()],
        };
        let mut merged = vec![0.0; n * c];
        for rows in &groups {
            let o = attention(&part(rows, 0), &part(rows, c), &part(rows, 2 * c), rows.len(), rows.len(), c);
            for (k, &r) in rows.iter().enumerate() {
                merged[r * c..(r + 1) * c].copy_from_slice(&o[k * c..(k + 1) * c]);
            }
        }
        let att = linear(&merged, n, &get(store, "attn.out.weight"), Some(&get(store, "attn.out.bias")), c, c);
        let y1: Vec<f64> = x1.iter().zip(&att).map(|(a, b)| a + b).collect();
        let t2 = layer_norm(&y1, c, &get(store, "norm2.weight"), &get(store, "norm2.bias"));
        let f = ffn(&t2, n, c, e * c, store, "ffn");
        out.extend(y1.iter().zip(&f).map(|(a, b)| a + b));
    }
    out
}

fn build_block(kind: GopKind, c: usize, e: usize, hw: (usize, usize), seed: u64) -> (GopBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let block = GopBlock::new(&mut Builder::new(&mut store, &mut init), BlockParams::new(kind, c, e).unwrap(), hw).unwrap();
    scramble(&mut store, seed + 1000);
    (block, store)
}

fn run_block(block: &GopBlock, store: &ParamStore, x: &Tensor, hw: (usize, usize)) -> Tensor {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    block.forward(&ctx, tape.constant(x.clone()), hw).unwrap().value()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn dwconv_block_matches_reference() {
    let (c, e, hw) = (8, 2, (4, 4));
    let (block, store) = build_block(GopKind::DWConv, c, e, hw, 1);
    let x = rand_tensor(2, &[2, c, 4, 4]);
    let got = run_block(&block, &store, &x, hw);
    let ec = c * e;
    let plane = 16;
    // 1x1 convolutions as per-pixel matrix products
    let mut t = Vec::new();
    let w = get(&store, "expand.weight");
    for b in 0..2 {
        for o in 0..ec {
            for p in 0..plane {
                t.push((0..c).map(|i| w[o * c + i] * x.data()[(b * c + i) * plane + p]).sum());
            }
        }
    }
    bn_eval(&mut t, ec, plane, &store, "bn1");
    t.iter_mut().for_each(|v| *v = gelu(*v));
    let mut t = conv(&t, [2, ec, 4, 4], &tensor(&store, "conv.weight"), 1, ec);
    bn_eval(&mut t, ec, plane, &store, "bn2");
    t.iter_mut().for_each(|v| *v = gelu(*v));
    let w = get(&store, "project.weight");
    let mut p = Vec::new();
    for b in 0..2 {
        for o in 0..c {
            for q in 0..plane {
                p.push((0..ec).map(|i| w[o * ec + i] * t[(b * ec + i) * plane + q]).sum());
            }
        }
    }
    bn_eval(&mut p, c, plane, &store, "bn3");
    let want: Vec<f64> = x.data().iter().zip(&p).map(|(a, b)| a + b).collect();
    assert!(max_diff(got.data(), &want) < TOL, "{}", max_diff(got.data(), &want));
}

#[test]
fn sa_block_matches_reference() {
    let (c, e, hw) = (32, 2, (2, 2));
    let (block, store) = build_block(GopKind::SA, c, e, hw, 3);
    let x = rand_tensor(4, &[2, 4, c]);
    let got = run_block(&block, &store, &x, hw);
    let want = reference_transformer(x.data(), hw, c, e, None, &store);
    assert!(max_diff(got.data(), &want) < TOL);
}

#[test]
fn lsa_block_matches_explicit_windows() {
    let (c, e, hw) = (32, 2, (14, 14));
    let (block, store) = build_block(GopKind::LSA, c, e, hw, 5);
    let x = rand_tensor(6, &[1, 196, c]);
    let got = run_block(&block, &store, &x, hw);
    let want = reference_transformer(x.data(), hw, c, e, Some(7), &store);
    assert!(max_diff(got.data(), &want) < TOL);
}

#[test]
fn lsa_handles_partial_edge_windows() {
    let (c, e, hw) = (32, 2, (9, 10));
    let (block, store) = build_block(GopKind::LSA, c, e, hw, 7);
    let x = rand_tensor(8, &[1, 90, c]);
    let got = run_block(&block, &store, &x, hw);
    let want = reference_transformer(x.data(), hw, c, e, Some(7), &store);
    assert!(max_diff(got.data(), &want) < TOL);
}

#[test]
fn mlp_block_matches_reference() {
    let (c, e, hw) = (8, 2, (2, 2));
    let n = 4;
    let (block, store) = build_block(GopKind::MLP, c, e, hw, 9);
    let x = rand_tensor(10, &[2, n, c]);
    let got = run_block(&block, &store, &x, hw);
    let hidden = uninas_core::gops::token_mix_hidden(n);
    let mut want = Vec::new();
    for img in x.data().chunks(n * c) {
        let t = layer_norm(img, c, &get(&store, "norm1.weight"), &get(&store, "norm1.bias"));
        // transpose to [c, N], mix tokens, transpose back
        let tt = to_grid(&t, n, c);
        let mixed = ffn(&tt, c, n, hidden, &store, "token_mix");
        let mixed = from_grid(&mixed, n, c);
        let y1: Vec<f64> = img.iter().zip(&mixed).map(|(a, b)| a + b).collect();
        let t2 = layer_norm(&y1, c, &get(&store, "norm2.weight"), &get(&store, "norm2.bias"));
        let f = ffn(&t2, n, c, e * c, &store, "ffn");
        want.extend(y1.iter().zip(&f).map(|(a, b)| a + b));
    }
    assert!(max_diff(got.data(), &want) < TOL);
}

#[test]
fn mlp_block_is_position_dependent() {
    let (c, hw) = (8, (2, 2));
    let (block, store) = build_block(GopKind::MLP, c, 2, hw, 11);
    let x = rand_tensor(12, &[1, 4, c]);
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor| {
        let d: Vec<f64> = perm.iter().flat_map(|&p| t.data()[p * c..(p + 1) * c].to_vec()).collect();
        Tensor::new(vec![1, 4, c], d).unwrap()
    };
    let a = permute(&run_block(&block, &store, &x, hw));
    let b = run_block(&block, &store, &permute(&x), hw);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn lsa_perturbation_stays_in_window() {
    let (c, hw) = (32, (14, 14));
    let (block, store) = build_block(GopKind::LSA, c, 2, hw, 13);
    let x = rand_tensor(14, &[1, 196, c]);
    let mut y = x.clone();
    // token (0, 0) sits in the top-left window
    for ch in 0..c {
        y.data_mut()[ch] += 0.5 + 0.01 * ch as f64;
    }
    let (a, b) = (run_block(&block, &store, &x, hw), run_block(&block, &store, &y, hw));
    for i in 0..14 {
        for j in 0..14 {
            let t = i * 14 + j;
            let moved = max_diff(&a.data()[t * c..(t + 1) * c], &b.data()[t * c..(t + 1) * c]) > 0.0;
            // tokens in other windows can only see the change through the
            // 3x3 positional conv, which reaches just (0..2, 0..2)
            let in_window = i < 7 && j < 7;
            assert!(in_window || !moved, "token ({i}, {j}) outside the window moved");
        }
    }
    // far corner of the same window is reached through attention
    let t = 6 * 14 + 6;
    assert!(max_diff(&a.data()[t * c..(t + 1) * c], &b.data()[t * c..(t + 1) * c]) > 0.0);
}

#[test]
fn transformer_zero_branches_leave_only_pos_encoding() {
    let (c, hw) = (32, (3, 3));
    let mut store = ParamStore::new();
    let mut init = Initializer::new(15);
    let block = TransformerBlock::new(&mut Builder::new(&mut store, &mut init), BlockParams::new(GopKind::SA, c, 2).unwrap())
        .unwrap();
    store.zero_where(|n| n.starts_with("attn.qkv.") || n.starts_with("attn.out.") || n.starts_with("ffn.fc2."));
    let x = rand_tensor(16, &[1, 9, c]);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let y = block.forward(&ctx, tape.constant(x.clone()), hw).unwrap().value();
    let grid = to_grid(x.data(), 9, c);
    let pe = from_grid(&conv(&grid, [1, c, 3, 3], &tensor(&store, "cpe.weight"), 1, c), 9, c);
    let want: Vec<f64> = x.data().iter().zip(&pe).map(|(a, b)| a + b).collect();
    assert!(max_diff(y.data(), &want) < TOL);
}

fn build_dsm(kind: DsmKind, c_in: usize, c_out: usize, seed: u64) -> (Dsm, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let dsm = Dsm::new(&mut Builder::new(&mut store, &mut init), DsmParams::new(kind, c_in, c_out, 2).unwrap()).unwrap();
    scramble(&mut store, seed + 1000);
    (dsm, store)
}

fn run_dsm(dsm: &Dsm, store: &ParamStore, x: &Tensor, hw: (usize, usize)) -> Tensor {
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    match dsm {
        Dsm::Local(d) => d.forward(&ctx, tape.constant(x.clone())).unwrap().value(),
        Dsm::Attention(d) => d.forward(&ctx, tape.constant(x.clone()), hw).unwrap().out.value(),
    }
}

#[test]
fn l_dsm_matches_conv_oracle() {
    let (dsm, store) = build_dsm(DsmKind::L, 4, 8, 17);
    let x = rand_tensor(18, &[1, 4, 4, 4]);
    let got = run_dsm(&dsm, &store, &x, (4, 4));
    assert_eq!(got.shape(), &[1, 8, 2, 2]);
    let mut want = naive_conv2d(&x, &tensor(&store, "conv.weight"), (2, 2), (1, 1), 1).into_data();
    bn_eval(&mut want, 8, 4, &store, "bn");
    assert!(max_diff(got.data(), &want) < 1e-12);
}

#[test]
fn token_dsms_are_global() {
    for kind in [DsmKind::G, DsmKind::LG] {
        let (dsm, store) = build_dsm(kind, 32, 32, 19);
        let x = rand_tensor(20, &[1, 16, 32]);
        let base = run_dsm(&dsm, &store, &x, (4, 4));
        assert_eq!(base.shape(), &[1, 4, 32]);
        for tok in 0..16 {
            let mut y = x.clone();
            for ch in 0..32 {
                y.data_mut()[tok * 32 + ch] += (0.3 * ch as f64).cos();
            }
            let moved = run_dsm(&dsm, &store, &y, (4, 4));
            for out in 0..4 {
                let d = max_diff(&base.data()[out * 32..(out + 1) * 32], &moved.data()[out * 32..(out + 1) * 32]);
                assert!(d > 0.0, "{kind}: input token {tok} does not reach output {out}");
            }
        }
    }
}

#[test]
fn lg_dsm_without_attention_is_the_shortcut() {
    let (dsm, mut store) = build_dsm(DsmKind::LG, 32, 64, 21);
    store.zero_where(|n| n.starts_with("value.") || n.starts_with("out."));
    let x = rand_tensor(22, &[1, 16, 32]);
    let got = run_dsm(&dsm, &store, &x, (4, 4));
    // 2x2 average pool on the grid, then the shortcut projection
    let mut pooled = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for ch in 0..32 {
                let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(di, dj)| x.data()[((2 * i + di) * 4 + 2 * j + dj) * 32 + ch])
                    .sum();
                pooled.push(s / 4.0);
            }
        }
    }
    let want = linear(&pooled, 4, &get(&store, "shortcut.weight"), Some(&get(&store, "shortcut.bias")), 32, 64);
    assert!(max_diff(got.data(), &want) < 1e-12);
}

#[test]
fn g_dsm_matches_reference() {
    let (dsm, store) = build_dsm(DsmKind::G, 32, 32, 23);
    let x = rand_tensor(24, &[1, 16, 32]);
    let got = run_dsm(&dsm, &store, &x, (4, 4));
    let c = 32;
    let xn = layer_norm(x.data(), c, &get(&store, "norm.weight"), &get(&store, "norm.bias"));
    // two kernel-3 stride-2 convolutions along the flattened sequence
    let seq_conv = |s: &[f64], len: usize, prefix: &str| -> (Vec<f64>, usize) {
        let w = get(&store, &format!("{prefix}.weight"));
        let b = get(&store, &format!("{prefix}.bias"));
        let out_len = (len + 2 - 3) / 2 + 1;
        let mut y = vec![0.0; out_len * c];
        for t in 0..out_len {
            for o in 0..c {
                let mut acc = b[o];
                for i in 0..c {
                    for k in 0..3 {
                        let pos = (2 * t + k) as isize - 1;
                        if pos >= 0 && (pos as usize) < len {
                            acc += w[(o * c + i) * 3 + k] * s[pos as usize * c + i];
                        }
                    }
                }
                y[t * c + o] = acc;
            }
        }
        (y, out_len)
    };
    let (q1, l1) = seq_conv(&xn, 16, "query1");
    let (q, l2) = seq_conv(&q1, l1, "query2");
    assert_eq!(l2, 4);
    let k = linear(&xn, 16, &get(&store, "key.weight"), Some(&get(&store, "key.bias")), c, c);
    let v = linear(&xn, 16, &get(&store, "value.weight"), Some(&get(&store, "value.bias")), c, c);
    let att = attention(&q, &k, &v, 4, 16, c);
    let att = linear(&att, 4, &get(&store, "out.weight"), Some(&get(&store, "out.bias")), c, c);
    let mut pooled = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for ch in 0..c {
                let s: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(di, dj)| x.data()[((2 * i + di) * 4 + 2 * j + dj) * c + ch])
                    .sum();
                pooled.push(s / 4.0);
            }
        }
    }
    let short = linear(&pooled, 4, &get(&store, "shortcut.weight"), Some(&get(&store, "shortcut.bias")), c, c);
    let want: Vec<f64> = short.iter().zip(&att).map(|(a, b)| a + b).collect();
    assert!(max_diff(got.data(), &want) < TOL);
}
