//! Forward constructors and vector-Jacobian products for every [`Op`].

use std::sync::Arc;

use super::gemm;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn binary_map(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        self.check_same_shape(op.name(), a, b)?;
        let out: Vec<f32> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        self.push_computed(op, out, shape, rg)
    }

    fn unary_map(&mut self, op: Op, x: Var, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out: Vec<f32> = self.values(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_computed(op, out, shape, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary_map(Op::Scale(x, c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary_map(Op::AddScalar(x, c), x, |v| v + c)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(Op::Silu(x), x, |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_map(Op::Sigmoid(x), x, sigmoid)
    }

    /// Natural log. Non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary_map(Op::Log(x), x, |v| v.ln())
    }

    /// x `[N,C,H,W]` + bias `[C]` broadcast over batch and space.
    pub fn bias_add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::tensor("bias_add_channel", format!("x rank {:?}", shape)));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(bias) != [c] {
            return Err(Error::tensor(
                "bias_add_channel",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let xv = self.values(x);
        let bv = self.values(bias);
        let hw = h * w;
        let mut out = Vec::with_capacity(xv.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let b = bv[ci];
                out.extend(xv[base..base + hw].iter().map(|v| v + b));
            }
        }
        let rg = self.any_requires_grad(&[x, bias]);
        self.push_computed(Op::BiasAddChannel { x, bias }, out, shape, rg)
    }

    /// x `[R,D]` + bias `[D]` broadcast over rows.
    pub fn bias_add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::tensor("bias_add_row", format!("x rank {:?}", shape)));
        }
        let (r, d) = (shape[0], shape[1]);
        if self.shape(bias) != [d] {
            return Err(Error::tensor(
                "bias_add_row",
                format!("bias {:?} for width {d}", self.shape(bias)),
            ));
        }
        let xv = self.values(x);
        let bv = self.values(bias);
        let mut out = Vec::with_capacity(xv.len());
        for ri in 0..r {
            out.extend(xv[ri * d..(ri + 1) * d].iter().zip(bv).map(|(v, b)| v + b));
        }
        let rg = self.any_requires_grad(&[x, bias]);
        self.push_computed(Op::BiasAddRow { x, bias }, out, shape, rg)
    }

    /// a `[m,k]` × b `[k,n]` → `[m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::tensor("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm::sgemm(m, k, n, 1.0, self.values(a), false, self.values(b), false, 0.0, &mut out);
        let rg = self.any_requires_grad(&[a, b]);
        self.push_computed(Op::Matmul { a, b }, out, vec![m, n], rg)
    }

    /// `[r,c]` → `[c,r]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::tensor("transpose", format!("rank {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        self.push_computed(Op::Transpose(x), out, vec![c, r], rg)
    }

    /// View with a new shape; element count must match. No data copy.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) || shape.is_empty() {
            return Err(Error::tensor(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let values = self.values_arc(x);
        let rg = self.requires_grad(x);
        self.push(Op::Reshape(x), values, shape.to_vec(), rg)
    }

    /// Numerically stable row-wise softmax on `[r,c]`.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::tensor("softmax_rows", format!("rank {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.requires_grad(x);
        self.push_computed(Op::SoftmaxRows(x), out, vec![r, c], rg)
    }

    /// Gather rows of an embedding table `[V,D]` → `[ids.len(),D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::tensor("embed", format!("table rank {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::tensor("embed", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|id| **id >= v) {
            return Err(Error::tensor("embed", format!("id {bad} out of range {v}")));
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push_computed(
            Op::Embed { table, ids: Arc::new(ids.to_vec()) },
            out,
            vec![ids.len(), d],
            rg,
        )
    }

    /// Mean over consecutive row groups: `[g*group,c]` → `[g,c]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(Error::tensor(
                "group_mean_rows",
                format!("{s:?} with group {group}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let groups = r / group;
        let xv = self.values(x);
        let mut out = vec![0.0; groups * c];
        for gi in 0..groups {
            let dst = &mut out[gi * c..(gi + 1) * c];
            for j in 0..group {
                let row = &xv[(gi * group + j) * c..(gi * group + j + 1) * c];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= group as f32;
            }
        }
        let rg = self.requires_grad(x);
        self.push_computed(Op::GroupMeanRows { x, group }, out, vec![groups, c], rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.values(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push_computed(Op::SumAll(x), vec![s], vec![1], rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x) as f32;
        let s: f32 = self.values(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push_computed(Op::MeanAll(x), vec![s / n], vec![1], rg)
    }

    /// Row sums: `[r,c]` → `[r]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::tensor("sum_rows", format!("rank {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.values(x);
        let out: Vec<f32> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.requires_grad(x);
        self.push_computed(Op::SumRows(x), out, vec![r], rg)
    }

    /// Mean squared error over all elements → scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse", a, b)?;
        let n = self.numel(a) as f64;
        let s: f64 = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum();
        let rg = self.any_requires_grad(&[a, b]);
        self.push_computed(Op::Mse(a, b), vec![(s / n) as f32], vec![1], rg)
    }

    /// Mean binary cross-entropy from logits → scalar.
    ///
    /// Uses the stable form `max(x,0) - x·t + ln(1+exp(-|x|))`. Targets must
    /// not require grad.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_same_shape("bce_with_logits", logits, targets)?;
        if self.requires_grad(targets) {
            return Err(Error::tensor("bce_with_logits", "targets must not require grad"));
        }
        let n = self.numel(logits) as f64;
        let s: f64 = self
            .values(logits)
            .iter()
            .zip(self.values(targets))
            .map(|(x, t)| {
                let (x, t) = (*x as f64, *t as f64);
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.requires_grad(logits);
        self.push_computed(
            Op::BceWithLogits { logits, targets },
            vec![(s / n) as f32],
            vec![1],
            rg,
        )
    }

    /// 2-D convolution, zero padding: `[N,Cin,H,W]` ∗ `[Cout,Cin,K,K]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] {
            return Err(Error::tensor("conv2d", format!("input {si:?} kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::tensor("conv2d", "stride 0"));
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, k) = (sk[0], sk[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::tensor(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}+{pad}"),
            ));
        }
        let oh = gemm::conv_out_dim(h, k, stride, pad);
        let ow = gemm::conv_out_dim(w, k, stride, pad);
        let p = oh * ow;
        let ckk = cin * k * k;
        let xv = self.values(input);
        let kv = self.values(kernel);
        let mut out = vec![0.0; n * cout * p];
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * p] };
        for ni in 0..n {
            let x_n = &xv[ni * cin * h * w..(ni + 1) * cin * h * w];
            let dst = &mut out[ni * cout * p..(ni + 1) * cout * p];
            if pointwise {
                gemm::sgemm(cout, ckk, p, 1.0, kv, false, x_n, false, 0.0, dst);
            } else {
                gemm::im2col(x_n, cin, h, w, k, stride, pad, &mut cols);
                gemm::sgemm(cout, ckk, p, 1.0, kv, false, &cols, false, 0.0, dst);
            }
        }
        let rg = self.any_requires_grad(&[input, kernel]);
        self.push_computed(
            Op::Conv2d { input, kernel, stride, pad },
            out,
            vec![n, cout, oh, ow],
            rg,
        )
    }

    /// Nearest-neighbour ×2 upsample of `[N,C,H,W]`.
    pub fn upsample_2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::tensor("upsample_2x", format!("rank {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.values(x);
        let mut out = vec![0.0; n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for pi in 0..n * c {
            let src = &xv[pi * h * w..(pi + 1) * h * w];
            let dst = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[y * w + x_];
                    let base = 2 * y * ow + 2 * x_;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + ow] = v;
                    dst[base + ow + 1] = v;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push_computed(Op::Upsample2x(x), out, vec![n, c, oh, ow], rg)
    }

    /// GroupNorm with per-channel affine over `[N,C,H,W]`, eps 1e-5.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::tensor("group_norm", format!("rank {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::tensor("group_norm", format!("{c} channels, {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::tensor(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let hw = h * w;
        let xv = self.values(x);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * hw;
                let chunk = &xv[start..start + m];
                let mean = chunk.iter().map(|v| *v as f64).sum::<f64>() / m as f64;
                let var = chunk
                    .iter()
                    .map(|v| {
                        let d = *v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                let inv_std = 1.0 / (var + GN_EPS).sqrt();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (gv[ch] as f64, bv[ch] as f64);
                    let src = &xv[start + ci * hw..start + (ci + 1) * hw];
                    let dst = &mut out[start + ci * hw..start + (ci + 1) * hw];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = (ga * ((*v as f64 - mean) * inv_std) + be) as f32;
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        self.push_computed(Op::GroupNorm { x, gamma, beta, groups }, out, s, rg)
    }

    /// Concat along channels: `[N,Ca,H,W]` ++ `[N,Cb,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::tensor("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let (n, ca, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let cb = sb[1];
        let hw = h * w;
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = Vec::with_capacity((ca + cb) * n * hw);
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let rg = self.any_requires_grad(&[a, b]);
        self.push_computed(Op::ConcatChannels(a, b), out, vec![n, ca + cb, h, w], rg)
    }

    /// Channel slice `from..to` of `[N,C,H,W]`.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || from >= to || to > s[1] {
            return Err(Error::tensor("slice_channels", format!("{from}..{to} of {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let xv = self.values(x);
        let width = to - from;
        let mut out = Vec::with_capacity(n * width * hw);
        for ni in 0..n {
            let base = (ni * c + from) * hw;
            out.extend_from_slice(&xv[base..base + width * hw]);
        }
        let rg = self.requires_grad(x);
        self.push_computed(Op::SliceChannels { x, from, to }, out, vec![n, width, h, w], rg)
    }

    /// Scaled dot-product attention. q `[Lq,D]`, k/v `[Lkv,D]`/`[Lkv,Dv]`,
    /// optional additive mask `[Lq,Lkv]` (0 to keep, large negative to drop).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::tensor(
                "attention",
                format!("q {sq:?} k {sk:?} v {sv:?}"),
            ));
        }
        let d = sq[1];
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f32).sqrt())?;
        let masked = match mask {
            Some(m) => {
                self.check_same_shape("attention", scaled, m)?;
                self.add(scaled, m)?
            }
            None => scaled,
        };
        let weights = self.softmax_rows(masked)?;
        self.matmul(weights, v)
    }

    /// Cross-attention with shared key/value source, as used by the denoiser:
    /// queries come from image features, keys and values from `kv`.
    pub fn cross_attention(&mut self, q: Var, kv: Var, mask: Option<Var>) -> Result<Var> {
        self.attention(q, kv, kv, mask)
    }

    /// x `[R,Din]` × w `[Din,Dout]` + b `[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.bias_add_row(y, b)
    }

    pub(crate) fn backprop_node(&mut self, ix: usize) -> Result<()> {
        let g = match self.nodes[ix].grad.as_ref() {
            Some(g) => g.clone(),
            None => return Ok(()),
        };
        let op = self.nodes[ix].op.clone();
        let out_vals = self.values_arc(Var(ix));
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, &g);
                self.accum(b, &g);
            }
            Op::Sub(a, b) => {
                self.accum(a, &g);
                let db: Vec<f32> = g.iter().map(|v| -v).collect();
                self.accum_owned(b, db);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let da: Vec<f32> =
                        g.iter().zip(self.values(b)).map(|(gi, bi)| gi * bi).collect();
                    self.accum_owned(a, da);
                }
                if self.requires_grad(b) {
                    let db: Vec<f32> =
                        g.iter().zip(self.values(a)).map(|(gi, ai)| gi * ai).collect();
                    self.accum_owned(b, db);
                }
            }
            Op::Div(a, b) => {
                if self.requires_grad(a) {
                    let da: Vec<f32> =
                        g.iter().zip(self.values(b)).map(|(gi, bi)| gi / bi).collect();
                    self.accum_owned(a, da);
                }
                if self.requires_grad(b) {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(out_vals.iter().zip(self.values(b)))
                        .map(|(gi, (oi, bi))| -gi * oi / bi)
                        .collect();
                    self.accum_owned(b, db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.accum_owned(x, dx);
            }
            Op::AddScalar(x, _) => self.accum(x, &g),
            Op::Silu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(self.values(x))
                    .map(|(gi, xi)| {
                        let s = sigmoid(*xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                self.accum_owned(x, dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f32> =
                    g.iter().zip(out_vals.iter()).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.accum_owned(x, dx);
            }
            Op::Log(x) => {
                let dx: Vec<f32> =
                    g.iter().zip(self.values(x)).map(|(gi, xi)| gi / xi).collect();
                self.accum_owned(x, dx);
            }
            Op::BiasAddChannel { x, bias } => {
                let s = self.shape(x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if self.requires_grad(bias) {
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            db[ci] += g[base..base + hw].iter().sum::<f32>();
                        }
                    }
                    self.accum_owned(bias, db);
                }
                self.accum(x, &g);
            }
            Op::BiasAddRow { x, bias } => {
                let s = self.shape(x).to_vec();
                let (r, d) = (s[0], s[1]);
                if self.requires_grad(bias) {
                    let mut db = vec![0.0; d];
                    for ri in 0..r {
                        for (dj, gj) in db.iter_mut().zip(&g[ri * d..(ri + 1) * d]) {
                            *dj += gj;
                        }
                    }
                    self.accum_owned(bias, db);
                }
                self.accum(x, &g);
            }
            Op::Matmul { a, b } => {
                let (m, kd) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bv = self.values_arc(b);
                    let mut da = vec![0.0; m * kd];
                    gemm::sgemm(m, n, kd, 1.0, &g, false, &bv, true, 0.0, &mut da);
                    self.accum_owned(a, da);
                }
                if self.requires_grad(b) {
                    let av = self.values_arc(a);
                    let mut db = vec![0.0; kd * n];
                    gemm::sgemm(kd, m, n, 1.0, &av, true, &g, false, 0.0, &mut db);
                    self.accum_owned(b, db);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accum_owned(x, dx);
            }
            Op::Reshape(x) => self.accum(x, &g),
            Op::SoftmaxRows(x) => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out_vals[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f32 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for ((d, yi), gi) in dx[i * c..(i + 1) * c].iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accum_owned(x, dx);
            }
            Op::Embed { table, ids } => {
                let d = self.shape(table)[1];
                let v = self.shape(table)[0];
                let mut dt = vec![0.0; v * d];
                for (i, id) in ids.iter().enumerate() {
                    for (dj, gj) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d])
                    {
                        *dj += gj;
                    }
                }
                self.accum_owned(table, dt);
            }
            Op::GroupMeanRows { x, group } => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let inv = 1.0 / group as f32;
                let mut dx = vec![0.0; r * c];
                for ri in 0..r {
                    let gi = ri / group;
                    for (d, gv) in dx[ri * c..(ri + 1) * c].iter_mut().zip(&g[gi * c..(gi + 1) * c])
                    {
                        *d = gv * inv;
                    }
                }
                self.accum_owned(x, dx);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.numel(x)];
                self.accum_owned(x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.numel(x);
                let dx = vec![g[0] / n as f32; n];
                self.accum_owned(x, dx);
            }
            Op::SumRows(x) => {
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for ri in 0..r {
                    dx[ri * c..(ri + 1) * c].fill(g[ri]);
                }
                self.accum_owned(x, dx);
            }
            Op::Mse(a, b) => {
                let n = self.numel(a) as f32;
                let scale = 2.0 * g[0] / n;
                let diff: Vec<f32> = self
                    .values(a)
                    .iter()
                    .zip(self.values(b))
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if self.requires_grad(b) {
                    let db: Vec<f32> = diff.iter().map(|v| -v).collect();
                    self.accum_owned(b, db);
                }
                self.accum_owned(a, diff);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = self.numel(logits) as f32;
                let scale = g[0] / n;
                let dx: Vec<f32> = self
                    .values(logits)
                    .iter()
                    .zip(self.values(targets))
                    .map(|(x, t)| scale * (sigmoid(*x) - t))
                    .collect();
                self.accum_owned(logits, dx);
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                self.backprop_conv2d(input, kernel, stride, pad, &g)?;
            }
            Op::Upsample2x(x) => {
                let s = self.shape(x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let ow = 2 * w;
                let mut dx = vec![0.0; planes * h * w];
                for pi in 0..planes {
                    let src = &g[pi * 4 * h * w..(pi + 1) * 4 * h * w];
                    let dst = &mut dx[pi * h * w..(pi + 1) * h * w];
                    for y in 0..h {
                        for x_ in 0..w {
                            let base = 2 * y * ow + 2 * x_;
                            dst[y * w + x_] =
                                src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
                        }
                    }
                }
                self.accum_owned(x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                self.backprop_group_norm(x, gamma, beta, groups, &g)?;
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = sb[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; n * ca * hw];
                    for ni in 0..n {
                        let src = &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                        da[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(src);
                    }
                    self.accum_owned(a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; n * cb * hw];
                    for ni in 0..n {
                        let start = ni * (ca + cb) * hw + ca * hw;
                        db[ni * cb * hw..(ni + 1) * cb * hw]
                            .copy_from_slice(&g[start..start + cb * hw]);
                    }
                    self.accum_owned(b, db);
                }
            }
            Op::SliceChannels { x, from, to } => {
                let s = self.shape(x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let width = to - from;
                let mut dx = vec![0.0; n * c * hw];
                for ni in 0..n {
                    let dst_start = (ni * c + from) * hw;
                    dx[dst_start..dst_start + width * hw]
                        .copy_from_slice(&g[ni * width * hw..(ni + 1) * width * hw]);
                }
                self.accum_owned(x, dx);
            }
        }
        Ok(())
    }

    fn backprop_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        g: &[f32],
    ) -> Result<()> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, k) = (sk[0], sk[2]);
        let oh = gemm::conv_out_dim(h, k, stride, pad);
        let ow = gemm::conv_out_dim(w, k, stride, pad);
        let p = oh * ow;
        let ckk = cin * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let xv = self.values_arc(input);
        let kv = self.values_arc(kernel);
        let need_dk = self.requires_grad(kernel);
        let need_dx = self.requires_grad(input);
        let mut dk = if need_dk { vec![0.0; cout * ckk] } else { Vec::new() };
        let mut dx = if need_dx { vec![0.0; n * cin * h * w] } else { Vec::new() };
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * p] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; ckk * p] };
        for ni in 0..n {
            let g_n = &g[ni * cout * p..(ni + 1) * cout * p];
            let x_n = &xv[ni * cin * h * w..(ni + 1) * cin * h * w];
            if need_dk {
                let data = if pointwise { x_n } else {
                    gemm::im2col(x_n, cin, h, w, k, stride, pad, &mut cols);
                    &cols[..]
                };
                gemm::sgemm(cout, p, ckk, 1.0, g_n, false, data, true, 1.0, &mut dk);
            }
            if need_dx {
                let dst = &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w];
                if pointwise {
                    gemm::sgemm(ckk, cout, p, 1.0, &kv, true, g_n, false, 1.0, dst);
                } else {
                    gemm::sgemm(ckk, cout, p, 1.0, &kv, true, g_n, false, 0.0, &mut dcols);
                    gemm::col2im(&dcols, cin, h, w, k, stride, pad, dst);
                }
            }
        }
        if need_dk {
            self.accum_owned(kernel, dk);
        }
        if need_dx {
            self.accum_owned(input, dx);
        }
        Ok(())
    }

    fn backprop_group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        g: &[f32],
    ) -> Result<()> {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let cg = c / groups;
        let hw = h * w;
        let m = cg * hw;
        let xv = self.values_arc(x);
        let gv = self.values_arc(gamma);
        let need_dx = self.requires_grad(x);
        let need_dg = self.requires_grad(gamma);
        let need_db = self.requires_grad(beta);
        let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * hw;
                let chunk = &xv[start..start + m];
                let gr = &g[start..start + m];
                let mean = chunk.iter().map(|v| *v as f64).sum::<f64>() / m as f64;
                let var = chunk
                    .iter()
                    .map(|v| {
                        let d = *v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                let inv_std = 1.0 / (var + GN_EPS).sqrt();
                // Per-group reductions of dxhat and dxhat·xhat.
                let mut sum_dxh = 0.0f64;
                let mut sum_dxh_xh = 0.0f64;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let ga = gv[ch] as f64;
                    for j in 0..hw {
                        let idx = ci * hw + j;
                        let xh = (chunk[idx] as f64 - mean) * inv_std;
                        let dxh = gr[idx] as f64 * ga;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        if need_dg {
                            dgamma[ch] += gr[idx] as f64 * xh;
                        }
                        if need_db {
                            dbeta[ch] += gr[idx] as f64;
                        }
                    }
                }
                if need_dx {
                    let dst = &mut dx[start..start + m];
                    let mf = m as f64;
                    for ci in 0..cg {
                        let ga = gv[gi * cg + ci] as f64;
                        for j in 0..hw {
                            let idx = ci * hw + j;
                            let xh = (chunk[idx] as f64 - mean) * inv_std;
                            let dxh = gr[idx] as f64 * ga;
                            dst[idx] =
                                (inv_std * (dxh - sum_dxh / mf - xh * sum_dxh_xh / mf)) as f32;
                        }
                    }
                }
            }
        }
        if need_dx {
            self.accum_owned(x, dx);
        }
        if need_dg {
            let dg: Vec<f32> = dgamma.iter().map(|v| *v as f32).collect();
            self.accum_owned(gamma, dg);
        }
        if need_db {
            let db: Vec<f32> = dbeta.iter().map(|v| *v as f32).collect();
            self.accum_owned(beta, db);
        }
        Ok(())
    }
}
