//! Finite-difference gradient oracle.
//!
//! Replays a recorded graph in `f64` with naive re-implementations of every
//! op (nested-loop conv, textbook softmax/BCE, two-pass norm stats), so the
//! oracle shares no numeric code with the production f32 engine. Central
//! differences on the replay give reference gradients accurate enough to
//! check the engine's analytic gradients to ~1e-6 relative, well below the
//! tolerances asserted in tests.

use std::collections::HashMap;

use super::{Op, Tape, Var};

/// Replacement values for leaf nodes, keyed by node index.
pub type Overrides = HashMap<usize, Vec<f64>>;

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Evaluate node `out` in f64, substituting `overrides` for leaf values.
pub fn eval_f64(tape: &Tape, out: Var, overrides: &Overrides) -> Vec<f64> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
    for ix in 0..=out.0 {
        let v = Var(ix);
        let shape = tape.shape(v);
        let computed: Vec<f64> = match tape.op(ix) {
            Op::Leaf => match overrides.get(&ix) {
                Some(o) => o.clone(),
                None => tape.values(v).iter().map(|x| *x as f64).collect(),
            },
            Op::Add(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x + y),
            Op::Sub(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x - y),
            Op::Mul(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x * y),
            Op::Div(a, b) => zip2(&vals[a.0], &vals[b.0], |x, y| x / y),
            Op::Scale(x, c) => vals[x.0].iter().map(|v| v * *c as f64).collect(),
            Op::AddScalar(x, c) => vals[x.0].iter().map(|v| v + *c as f64).collect(),
            Op::Silu(x) => vals[x.0].iter().map(|v| v * sigmoid64(*v)).collect(),
            Op::Sigmoid(x) => vals[x.0].iter().map(|v| sigmoid64(*v)).collect(),
            Op::Log(x) => vals[x.0].iter().map(|v| v.ln()).collect(),
            Op::BiasAddChannel { x, bias } => {
                let s = tape.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut out = Vec::with_capacity(n * c * hw);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        out.extend(
                            vals[x.0][base..base + hw].iter().map(|v| v + vals[bias.0][ci]),
                        );
                    }
                }
                out
            }
            Op::BiasAddRow { x, bias } => {
                let d = tape.shape(*bias)[0];
                vals[x.0]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + vals[bias.0][i % d])
                    .collect()
            }
            Op::Matmul { a, b } => {
                let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
                let n = tape.shape(*b)[1];
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = vals[a.0][i * k + l];
                        for j in 0..n {
                            out[i * n + j] += av * vals[b.0][l * n + j];
                        }
                    }
                }
                out
            }
            Op::Transpose(x) => {
                let s = tape.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = vals[x.0][i * c + j];
                    }
                }
                out
            }
            Op::Reshape(x) => vals[x.0].clone(),
            Op::SoftmaxRows(x) => {
                let s = tape.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = &vals[x.0][i * c..(i + 1) * c];
                    let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    out.extend(exps.iter().map(|e| e / sum));
                }
                out
            }
            Op::Embed { table, ids } => {
                let d = tape.shape(*table)[1];
                let mut out = Vec::with_capacity(ids.len() * d);
                for id in ids.iter() {
                    out.extend_from_slice(&vals[table.0][id * d..(id + 1) * d]);
                }
                out
            }
            Op::GroupMeanRows { x, group } => {
                let s = tape.shape(*x);
                let (r, c) = (s[0], s[1]);
                let groups = r / group;
                let mut out = vec![0.0; groups * c];
                for ri in 0..r {
                    for j in 0..c {
                        out[(ri / group) * c + j] += vals[x.0][ri * c + j] / *group as f64;
                    }
                }
                out
            }
            Op::SumAll(x) => vec![vals[x.0].iter().sum()],
            Op::MeanAll(x) => {
                vec![vals[x.0].iter().sum::<f64>() / vals[x.0].len() as f64]
            }
            Op::SumRows(x) => {
                let s = tape.shape(*x);
                let (r, c) = (s[0], s[1]);
                (0..r).map(|i| vals[x.0][i * c..(i + 1) * c].iter().sum()).collect()
            }
            Op::Mse(a, b) => {
                let n = vals[a.0].len() as f64;
                let s: f64 = vals[a.0]
                    .iter()
                    .zip(&vals[b.0])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                vec![s / n]
            }
            Op::BceWithLogits { logits, targets } => {
                let n = vals[logits.0].len() as f64;
                let s: f64 = vals[logits.0]
                    .iter()
                    .zip(&vals[targets.0])
                    .map(|(x, t)| {
                        let p = sigmoid64(*x);
                        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                    })
                    .sum();
                vec![s / n]
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                conv2d_naive(tape, *input, *kernel, *stride, *pad, &vals)
            }
            Op::Upsample2x(x) => {
                let s = tape.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let ow = 2 * w;
                let mut out = vec![0.0; planes * 4 * h * w];
                for pi in 0..planes {
                    for y in 0..2 * h {
                        for x_ in 0..ow {
                            out[pi * 4 * h * w + y * ow + x_] =
                                vals[x.0][pi * h * w + (y / 2) * w + x_ / 2];
                        }
                    }
                }
                out
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                group_norm_naive(tape, *x, *gamma, *beta, *groups, &vals)
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (tape.shape(*a), tape.shape(*b));
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = sb[1];
                let mut out = Vec::with_capacity(n * (ca + cb) * hw);
                for ni in 0..n {
                    out.extend_from_slice(&vals[a.0][ni * ca * hw..(ni + 1) * ca * hw]);
                    out.extend_from_slice(&vals[b.0][ni * cb * hw..(ni + 1) * cb * hw]);
                }
                out
            }
            Op::SliceChannels { x, from, to } => {
                let s = tape.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let width = to - from;
                let mut out = Vec::with_capacity(n * width * hw);
                for ni in 0..n {
                    let base = (ni * c + from) * hw;
                    out.extend_from_slice(&vals[x.0][base..base + width * hw]);
                }
                out
            }
        };
        debug_assert_eq!(computed.len(), shape.iter().product::<usize>());
        vals.push(computed);
    }
    vals.pop().unwrap()
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn conv2d_naive(
    tape: &Tape,
    input: Var,
    kernel: Var,
    stride: usize,
    pad: usize,
    vals: &[Vec<f64>],
) -> Vec<f64> {
    let si = tape.shape(input);
    let sk = tape.shape(kernel);
    let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
    let (cout, k) = (sk[0], sk[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let x = &vals[input.0];
    let ker = &vals[kernel.0];
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * ker[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn group_norm_naive(
    tape: &Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    vals: &[Vec<f64>],
) -> Vec<f64> {
    let s = tape.shape(x);
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let cg = c / groups;
    let m = cg * hw;
    let xv = &vals[x.0];
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let chunk = &xv[start..start + m];
            let mean: f64 = chunk.iter().sum::<f64>() / m as f64;
            let var: f64 = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let denom = (var + 1e-5).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..hw {
                    let idx = start + ci * hw + j;
                    out[idx] = vals[gamma.0][ch] * ((xv[idx] - mean) / denom) + vals[beta.0][ch];
                }
            }
        }
    }
    out
}

/// Central finite difference of scalar `out` w.r.t. element `elem` of `leaf`.
pub fn fd_partial(tape: &Tape, out: Var, leaf: Var, elem: usize, h: f64) -> f64 {
    let base: Vec<f64> = tape.values(leaf).iter().map(|x| *x as f64).collect();
    let mut plus = base.clone();
    plus[elem] += h;
    let mut minus = base;
    minus[elem] -= h;
    let mut ov = Overrides::new();
    ov.insert(leaf.0, plus);
    let fp = eval_f64(tape, out, &ov)[0];
    ov.insert(leaf.0, minus);
    let fm = eval_f64(tape, out, &ov)[0];
    (fp - fm) / (2.0 * h)
}

/// Result of comparing analytic gradients against the oracle.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Compare the tape's analytic gradient of `leaf` against finite differences
/// on the f64 replay, over the given element indices (all elements if empty).
///
/// Passes when for every element `|g - fd| <= abs_floor + rel_tol·max(|g|,|fd|)`.
pub fn check_leaf(
    tape: &Tape,
    out: Var,
    leaf: Var,
    elems: &[usize],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<CheckReport, String> {
    let grad = tape
        .grad(leaf)
        .ok_or_else(|| format!("leaf {} has no gradient; run backward first", leaf.0))?;
    let all: Vec<usize>;
    let elems = if elems.is_empty() {
        all = (0..grad.len()).collect();
        &all
    } else {
        elems
    };
    let mut report = CheckReport { checked: 0, max_rel: 0.0, max_abs: 0.0 };
    for &e in elems {
        let fd = fd_partial(tape, out, leaf, e, h);
        let g = grad[e] as f64;
        let abs = (g - fd).abs();
        let denom = g.abs().max(fd.abs());
        let rel = if denom > 0.0 { abs / denom } else { 0.0 };
        report.checked += 1;
        report.max_abs = report.max_abs.max(abs);
        if abs > abs_floor + rel_tol * denom {
            return Err(format!(
                "leaf {} elem {e}: analytic {g:.8e} vs fd {fd:.8e} (abs {abs:.2e}, rel {rel:.2e})",
                leaf.0
            ));
        }
        if denom > 10.0 * abs_floor {
            report.max_rel = report.max_rel.max(rel);
        }
    }
    Ok(report)
}
