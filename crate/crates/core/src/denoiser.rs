//! Tiny conditional UNet: noise prediction eps_hat plus four decoder feature
//! taps at the (H/8, H/4, H/2, H) resolution ladder used by the perception
//! loss. Cross-attention over the condition sequence runs at the two lowest
//! resolutions.

use crate::autodiff::{Tape, Var};
use crate::conditioning::{encode_condition, ConditionTokens};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;

pub const DEFAULT_BASE_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct UNetConfig {
    /// C0; stage widths run C0, 2C0, 4C0, 8C0.
    pub base_channels: usize,
    /// Condition embedding width (matches the conditioning encoder).
    pub cond_dim: usize,
    /// Sinusoidal timestep code width; also the temb MLP width.
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: DEFAULT_BASE_CHANNELS,
            cond_dim: crate::conditioning::DEFAULT_DIM,
            temb_dim: 64,
            groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = [1usize, 2, 4, 8]
            .iter()
            .all(|m| (m * self.base_channels) % self.groups == 0);
        if self.base_channels == 0 || !widths_ok {
            return Err(Error::Pipeline(format!(
                "base_channels {} incompatible with {} norm groups",
                self.base_channels, self.groups
            )));
        }
        if self.temb_dim % 2 != 0 || self.temb_dim == 0 {
            return Err(Error::Pipeline(format!("temb_dim {} must be even", self.temb_dim)));
        }
        if self.cond_dim % 4 != 0 || self.cond_dim == 0 {
            return Err(Error::Pipeline(format!(
                "cond_dim {} must be a multiple of 4",
                self.cond_dim
            )));
        }
        Ok(())
    }
}

/// Sinusoidal timestep code (half sines, half cosines over a geometric
/// frequency ladder); a pure function of `t`.
pub fn timestep_code(t: usize, dim: usize) -> Vec<f32> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let x = t as f64 * omega;
        out[i] = x.sin() as f32;
        out[half + i] = x.cos() as f32;
    }
    out
}

/// Tape handles for one forward pass.
pub struct DenoiserOutput {
    /// Same shape as the input `z_t`.
    pub eps_hat: Var,
    /// Decoder taps, lowest resolution first:
    /// (8C0 @ H/8, 4C0 @ H/4, 2C0 @ H/2, C0 @ H).
    pub taps: [Var; 4],
}

pub struct UNet {
    pub cfg: UNetConfig,
}

struct ResBlockSpec {
    name: String,
    c_in: usize,
    c_out: usize,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn res_blocks(&self) -> Vec<ResBlockSpec> {
        let c = self.cfg.base_channels;
        let spec = |name: &str, c_in: usize, c_out: usize| ResBlockSpec {
            name: format!("denoiser/{name}"),
            c_in,
            c_out,
        };
        vec![
            spec("enc0.block0", c, c),
            spec("enc0.block1", c, c),
            spec("enc1.block0", 2 * c, 2 * c),
            spec("enc1.block1", 2 * c, 2 * c),
            spec("enc2.block0", 4 * c, 4 * c),
            spec("enc2.block1", 4 * c, 4 * c),
            spec("mid.block0", 8 * c, 8 * c),
            spec("mid.block1", 8 * c, 8 * c),
            spec("dec2.block0", 8 * c, 4 * c),
            spec("dec2.block1", 4 * c, 4 * c),
            spec("dec1.block0", 4 * c, 2 * c),
            spec("dec1.block1", 2 * c, 2 * c),
            spec("dec0.block0", 2 * c, c),
            spec("dec0.block1", c, c),
        ]
    }

    /// Register all `denoiser/*` parameters.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let cfg = &self.cfg;
        let c = cfg.base_channels;
        let th = cfg.temb_dim;
        let mut rng = stream(seed, "denoiser-init", 0);
        store.add("denoiser/stem.w", init::he_conv(&mut rng, c, 3, 3), &[c, 3, 3, 3])?;
        store.add("denoiser/temb.w1", init::he_linear(&mut rng, th, th), &[th, th])?;
        store.add("denoiser/temb.b1", init::zeros(th), &[th])?;
        store.add("denoiser/temb.w2", init::he_linear(&mut rng, th, th), &[th, th])?;
        store.add("denoiser/temb.b2", init::zeros(th), &[th])?;
        for b in self.res_blocks() {
            let (ci, co) = (b.c_in, b.c_out);
            store.add(&format!("{}.gn1.g", b.name), init::ones(ci), &[ci])?;
            store.add(&format!("{}.gn1.b", b.name), init::zeros(ci), &[ci])?;
            store.add(
                &format!("{}.conv1.w", b.name),
                init::he_conv(&mut rng, co, ci, 3),
                &[co, ci, 3, 3],
            )?;
            store.add(&format!("{}.temb.w", b.name), init::he_linear(&mut rng, th, co), &[th, co])?;
            store.add(&format!("{}.temb.b", b.name), init::zeros(co), &[co])?;
            store.add(&format!("{}.gn2.g", b.name), init::ones(co), &[co])?;
            store.add(&format!("{}.gn2.b", b.name), init::zeros(co), &[co])?;
            // Zero-init second conv: blocks start as near-identity.
            store.add(&format!("{}.conv2.w", b.name), init::zeros(co * co * 9), &[co, co, 3, 3])?;
            if ci != co {
                store.add(
                    &format!("{}.skip.w", b.name),
                    init::he_conv(&mut rng, co, ci, 1),
                    &[co, ci, 1, 1],
                )?;
            }
        }
        for (name, cin, cout) in [
            ("down0", c, 2 * c),
            ("down1", 2 * c, 4 * c),
            ("down2", 4 * c, 8 * c),
            ("up2", 8 * c, 4 * c),
            ("up1", 4 * c, 2 * c),
            ("up0", 2 * c, c),
        ] {
            store.add(
                &format!("denoiser/{name}.w"),
                init::he_conv(&mut rng, cout, cin, 3),
                &[cout, cin, 3, 3],
            )?;
        }
        for (name, ch) in [("mid.attn", 8 * c), ("dec2.attn", 4 * c)] {
            let d = cfg.cond_dim;
            store.add(
                &format!("denoiser/{name}.wq"),
                init::he_linear(&mut rng, ch, ch),
                &[ch, ch],
            )?;
            store.add(&format!("denoiser/{name}.wk"), init::he_linear(&mut rng, d, ch), &[d, ch])?;
            store.add(&format!("denoiser/{name}.wv"), init::he_linear(&mut rng, d, ch), &[d, ch])?;
            store.add(
                &format!("denoiser/{name}.wo"),
                init::normal(&mut rng, ch * ch, 0.02),
                &[ch, ch],
            )?;
        }
        store.add("denoiser/out.gn.g", init::ones(c), &[c])?;
        store.add("denoiser/out.gn.b", init::zeros(c), &[c])?;
        store.add("denoiser/out.w", init::zeros(3 * c * 9), &[3, c, 3, 3])?;
        store.add("denoiser/out.b", init::zeros(3), &[3])?;
        Ok(())
    }

    fn var(store: &ParamStore, bound: &BoundParams, name: &str) -> Result<Var> {
        store
            .id(name)
            .map(|id| bound.var(id))
            .ok_or_else(|| Error::Pipeline(format!("missing parameter {name}")))
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &BoundParams,
        name: &str,
        x: Var,
        temb: Var,
        c_in: usize,
        c_out: usize,
    ) -> Result<Var> {
        let g1 = Self::var(store, bound, &format!("{name}.gn1.g"))?;
        let b1 = Self::var(store, bound, &format!("{name}.gn1.b"))?;
        let w1 = Self::var(store, bound, &format!("{name}.conv1.w"))?;
        let tw = Self::var(store, bound, &format!("{name}.temb.w"))?;
        let tb = Self::var(store, bound, &format!("{name}.temb.b"))?;
        let g2 = Self::var(store, bound, &format!("{name}.gn2.g"))?;
        let b2 = Self::var(store, bound, &format!("{name}.gn2.b"))?;
        let w2 = Self::var(store, bound, &format!("{name}.conv2.w"))?;
        let mut h = tape.group_norm(x, g1, b1, self.cfg.groups)?;
        h = tape.silu(h)?;
        h = tape.conv2d(h, w1, 1, 1)?;
        // Per-channel timestep bias.
        let tproj = tape.matmul(temb, tw)?;
        let tproj = tape.bias_add_row(tproj, tb)?;
        let tproj = tape.reshape(tproj, &[c_out])?;
        h = tape.bias_add_channel(h, tproj)?;
        h = tape.group_norm(h, g2, b2, self.cfg.groups)?;
        h = tape.silu(h)?;
        h = tape.conv2d(h, w2, 1, 1)?;
        let skip = if c_in != c_out {
            let sw = Self::var(store, bound, &format!("{name}.skip.w"))?;
            tape.conv2d(x, sw, 1, 0)?
        } else {
            x
        };
        tape.add(skip, h)
    }

    fn cross_attn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &BoundParams,
        name: &str,
        x: Var,
        cond: Var,
        cond_mask: &[f32],
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let hw = h * w;
        let wq = Self::var(store, bound, &format!("{name}.wq"))?;
        let wk = Self::var(store, bound, &format!("{name}.wk"))?;
        let wv = Self::var(store, bound, &format!("{name}.wv"))?;
        let wo = Self::var(store, bound, &format!("{name}.wo"))?;
        let rows = tape.reshape(x, &[c, hw])?;
        let rows = tape.transpose(rows)?;
        let q = tape.matmul(rows, wq)?;
        let k = tape.matmul(cond, wk)?;
        let v = tape.matmul(cond, wv)?;
        let mask = crate::conditioning::additive_mask(tape, cond_mask, hw)?;
        let att = tape.attention(q, k, v, Some(mask))?;
        let att = tape.matmul(att, wo)?;
        let att = tape.transpose(att)?;
        let att = tape.reshape(att, &[1, c, h, w])?;
        tape.add(x, att)
    }

    /// Full conditional forward. `z_t` must be `[1, 3, H, W]` with H and W
    /// divisible by 8.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &BoundParams,
        z_t: Var,
        t: usize,
        tokens: &ConditionTokens,
    ) -> Result<DenoiserOutput> {
        let shape = tape.shape(z_t).to_vec();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
            return Err(Error::Pipeline(format!("z_t shape {shape:?}, expected [1,3,H,W]")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Pipeline(format!(
                "spatial dims {h}x{w} must be divisible by 8"
            )));
        }
        if t == 0 {
            return Err(Error::Pipeline("timestep t must be at least 1".into()));
        }
        let cfg = &self.cfg;
        let c = cfg.base_channels;

        // Timestep embedding MLP.
        let code = tape.leaf(timestep_code(t, cfg.temb_dim), &[1, cfg.temb_dim])?;
        let tw1 = Self::var(store, bound, "denoiser/temb.w1")?;
        let tb1 = Self::var(store, bound, "denoiser/temb.b1")?;
        let tw2 = Self::var(store, bound, "denoiser/temb.w2")?;
        let tb2 = Self::var(store, bound, "denoiser/temb.b2")?;
        let temb = tape.matmul(code, tw1)?;
        let temb = tape.bias_add_row(temb, tb1)?;
        let temb = tape.silu(temb)?;
        let temb = tape.matmul(temb, tw2)?;
        let temb = tape.bias_add_row(temb, tb2)?;

        // Condition sequence.
        let cond = encode_condition(tape, bound, store, tokens)?;

        let stem_w = Self::var(store, bound, "denoiser/stem.w")?;
        let x0 = tape.conv2d(z_t, stem_w, 1, 1)?;

        let rb = |tape: &mut Tape, name: &str, x: Var, ci: usize, co: usize| -> Result<Var> {
            self.res_block(tape, store, bound, &format!("denoiser/{name}"), x, temb, ci, co)
        };

        let mut e0 = rb(tape, "enc0.block0", x0, c, c)?;
        e0 = rb(tape, "enc0.block1", e0, c, c)?;
        let d0w = Self::var(store, bound, "denoiser/down0.w")?;
        let mut e1 = tape.conv2d(e0, d0w, 2, 1)?;
        e1 = rb(tape, "enc1.block0", e1, 2 * c, 2 * c)?;
        e1 = rb(tape, "enc1.block1", e1, 2 * c, 2 * c)?;
        let d1w = Self::var(store, bound, "denoiser/down1.w")?;
        let mut e2 = tape.conv2d(e1, d1w, 2, 1)?;
        e2 = rb(tape, "enc2.block0", e2, 4 * c, 4 * c)?;
        e2 = rb(tape, "enc2.block1", e2, 4 * c, 4 * c)?;
        let d2w = Self::var(store, bound, "denoiser/down2.w")?;
        let mut mid = tape.conv2d(e2, d2w, 2, 1)?;
        mid = rb(tape, "mid.block0", mid, 8 * c, 8 * c)?;
        mid = self.cross_attn(tape, store, bound, "denoiser/mid.attn", mid, cond, &tokens.mask)?;
        mid = rb(tape, "mid.block1", mid, 8 * c, 8 * c)?;
        let tap1 = mid;

        let u2w = Self::var(store, bound, "denoiser/up2.w")?;
        let mut d2 = tape.upsample_2x(mid)?;
        d2 = tape.conv2d(d2, u2w, 1, 1)?;
        d2 = tape.concat_channels(d2, e2)?;
        d2 = rb(tape, "dec2.block0", d2, 8 * c, 4 * c)?;
        d2 = rb(tape, "dec2.block1", d2, 4 * c, 4 * c)?;
        d2 = self.cross_attn(tape, store, bound, "denoiser/dec2.attn", d2, cond, &tokens.mask)?;
        let tap2 = d2;

        let u1w = Self::var(store, bound, "denoiser/up1.w")?;
        let mut d1 = tape.upsample_2x(d2)?;
        d1 = tape.conv2d(d1, u1w, 1, 1)?;
        d1 = tape.concat_channels(d1, e1)?;
        d1 = rb(tape, "dec1.block0", d1, 4 * c, 2 * c)?;
        d1 = rb(tape, "dec1.block1", d1, 2 * c, 2 * c)?;
        let tap3 = d1;

        let u0w = Self::var(store, bound, "denoiser/up0.w")?;
        let mut d0 = tape.upsample_2x(d1)?;
        d0 = tape.conv2d(d0, u0w, 1, 1)?;
        d0 = tape.concat_channels(d0, e0)?;
        d0 = rb(tape, "dec0.block0", d0, 2 * c, c)?;
        d0 = rb(tape, "dec0.block1", d0, c, c)?;
        let tap4 = d0;

        let og = Self::var(store, bound, "denoiser/out.gn.g")?;
        let ob = Self::var(store, bound, "denoiser/out.gn.b")?;
        let ow = Self::var(store, bound, "denoiser/out.w")?;
        let obias = Self::var(store, bound, "denoiser/out.b")?;
        let mut out = tape.group_norm(d0, og, ob, self.cfg.groups)?;
        out = tape.silu(out)?;
        out = tape.conv2d(out, ow, 1, 1)?;
        let eps_hat = tape.bias_add_channel(out, obias)?;

        Ok(DenoiserOutput { eps_hat, taps: [tap1, tap2, tap3, tap4] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Generator side: UNet plus condition encoder.
    pub denoiser: usize,
    pub seg_head: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        if self.denoiser == 0 {
            return 0.0;
        }
        self.seg_head as f64 / self.denoiser as f64
    }
}

pub fn count_params(store: &ParamStore) -> ParamCounts {
    ParamCounts {
        denoiser: store.num_scalars_with_prefix("denoiser/")
            + store.num_scalars_with_prefix("cond/"),
        seg_head: store.num_scalars_with_prefix("seg/"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{
        init_cond_params, layout_condition, null_condition, AnnotatedLayout, LayoutObject,
        Vocabulary,
    };
    use crate::pa_attr::{AttributeStrategy, PerceptionAttribute};
    use crate::scenegen::Category;
    use rand::Rng;

    fn small_cfg() -> UNetConfig {
        UNetConfig { base_channels: 8, cond_dim: 16, temb_dim: 16, groups: 4 }
    }

    fn build(cfg: UNetConfig, seed: u64) -> (UNet, ParamStore, Vocabulary) {
        let unet = UNet::new(cfg).unwrap();
        let vocab = Vocabulary::new(&Category::ALL, 4).unwrap();
        let mut store = ParamStore::new();
        init_cond_params(&mut store, &vocab, cfg.cond_dim, seed).unwrap();
        unet.init_params(&mut store, seed).unwrap();
        (unet, store, vocab)
    }

    fn layout() -> AnnotatedLayout {
        AnnotatedLayout {
            objects: vec![
                LayoutObject {
                    category: Category::Circle,
                    tl_bin: 0,
                    br_bin: 5,
                    attribute: PerceptionAttribute::Easy,
                },
                LayoutObject {
                    category: Category::Square,
                    tl_bin: 10,
                    br_bin: 15,
                    attribute: PerceptionAttribute::Hard,
                },
            ],
            image_w: 32,
            image_h: 32,
            strategy: AttributeStrategy::Origin,
        }
    }

    fn forward_once(
        unet: &UNet,
        store: &ParamStore,
        tokens: &crate::conditioning::ConditionTokens,
        z: Vec<f32>,
        hw: (usize, usize),
        t: usize,
    ) -> (Vec<f32>, [Vec<usize>; 4]) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, store).unwrap();
        let zv = tape.leaf(z, &[1, 3, hw.0, hw.1]).unwrap();
        let out = unet.forward(&mut tape, store, &bound, zv, t, tokens).unwrap();
        let eps = tape.values(out.eps_hat).to_vec();
        let shapes = out.taps.map(|v| tape.shape(v).to_vec());
        (eps, shapes)
    }

    #[test]
    fn eps_shape_and_tap_ladder_hold_for_32_and_64() {
        let (unet, store, vocab) = build(small_cfg(), 0);
        let tokens = layout_condition(&layout(), &vocab).unwrap();
        for size in [32usize, 64] {
            let mut rng = crate::rng::stream(1, "unet-shape", size as u64);
            let z: Vec<f32> = (0..3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (eps, tap_shapes) = forward_once(&unet, &store, &tokens, z, (size, size), 10);
            assert_eq!(eps.len(), 3 * size * size);
            let c = unet.cfg.base_channels;
            let expect = [
                vec![1, 8 * c, size / 8, size / 8],
                vec![1, 4 * c, size / 4, size / 4],
                vec![1, 2 * c, size / 2, size / 2],
                vec![1, c, size, size],
            ];
            assert_eq!(tap_shapes, expect, "size {size}");
        }
    }

    #[test]
    fn object_order_swap_still_produces_valid_shapes() {
        let (unet, store, vocab) = build(small_cfg(), 3);
        let mut swapped = layout();
        swapped.objects.reverse();
        let z: Vec<f32> = vec![0.1; 3 * 16 * 16];
        for l in [layout(), swapped] {
            let tokens = layout_condition(&l, &vocab).unwrap();
            let (eps, _) = forward_once(&unet, &store, &tokens, z.clone(), (16, 16), 5);
            assert_eq!(eps.len(), 3 * 16 * 16);
            assert!(eps.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_finite_for_wide_inputs_over_50_seeds() {
        let (unet, store, vocab) = build(small_cfg(), 7);
        let tokens = layout_condition(&layout(), &vocab).unwrap();
        let null = null_condition(&vocab);
        for seed in 0..50u64 {
            let mut rng = crate::rng::stream(seed, "unet-finite", 0);
            let z: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(1..=200);
            let toks = if seed % 5 == 0 { &null } else { &tokens };
            let (eps, _) = forward_once(&unet, &store, toks, z, (16, 16), t);
            assert!(eps.iter().all(|v| v.is_finite()), "seed {seed}");
        }
    }

    #[test]
    fn indivisible_spatial_dims_are_rejected() {
        let (unet, store, vocab) = build(small_cfg(), 0);
        let tokens = layout_condition(&layout(), &vocab).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, &store).unwrap();
        let z = tape.leaf(vec![0.0; 3 * 20 * 20], &[1, 3, 20, 20]).unwrap();
        assert!(matches!(
            unet.forward(&mut tape, &store, &bound, z, 1, &tokens),
            Err(Error::Pipeline(_))
        ));
        let z = tape.leaf(vec![0.0; 3 * 16 * 16], &[1, 3, 16, 16]).unwrap();
        assert!(unet.forward(&mut tape, &store, &bound, z, 0, &tokens).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_on_16x16() {
        use crate::autodiff::fdcheck;
        let (unet, store, vocab) = build(small_cfg(), 11);
        let tokens = layout_condition(&layout(), &vocab).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &store).unwrap();
        let mut rng = crate::rng::stream(12, "unet-fd", 0);
        let zdata: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = tape.leaf_grad(zdata, &[1, 3, 16, 16]).unwrap();
        let out = unet.forward(&mut tape, &store, &bound, z, 7, &tokens).unwrap();
        // Random-weight scalar so every output entry influences the loss.
        let weights: Vec<f32> =
            (0..3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wleaf = tape.leaf(weights, &[1, 3, 16, 16]).unwrap();
        let prod = tape.mul(out.eps_hat, wleaf).unwrap();
        let loss = tape.mean_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let mut checked = 0;
        let mut check = |leaf: Var, elems: &[usize]| {
            let report =
                fdcheck::check_leaf(&tape, loss, leaf, elems, 1e-3, 1e-3, 1e-5).unwrap();
            checked += report.checked;
        };
        check(z, &[0, 100, 500]);
        let leaf_of = |name: &str| bound.var(store.id(name).unwrap());
        check(leaf_of("denoiser/stem.w"), &[0, 50]);
        check(leaf_of("denoiser/mid.attn.wq"), &[0, 77]);
        check(leaf_of("denoiser/dec0.block1.conv2.w"), &[1, 9]);
        check(leaf_of("denoiser/out.w"), &[0, 20]);
        check(leaf_of("cond/table"), &[0]);
        assert!(checked >= 10, "only {checked} entries checked");
    }

    #[test]
    fn param_count_closed_form_and_checkpoint_walk() {
        // conv(3->8, k3) + bias: 3*8*9 + 8 = 224.
        let mut tiny = ParamStore::new();
        tiny.add("denoiser/c.w", vec![0.0; 8 * 3 * 9], &[8, 3, 3, 3]).unwrap();
        tiny.add("denoiser/c.b", vec![0.0; 8], &[8]).unwrap();
        let counts = count_params(&tiny);
        assert_eq!(counts.denoiser, 224);
        assert_eq!(counts.seg_head, 0);
        assert_eq!(counts.ratio(), 0.0);

        // Full model: counts must match an independent walk over the
        // serialized archive.
        let (_, store, _) = build(UNetConfig::default(), 5);
        let counts = count_params(&store);
        let archive = crate::checkpoint::Archive::from_store(&store);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("unet.pdck");
        archive.write(&p).unwrap();
        let back = crate::checkpoint::Archive::read(&p).unwrap();
        let walked: usize = back
            .entries
            .iter()
            .filter(|e| e.name.starts_with("denoiser/") || e.name.starts_with("cond/"))
            .map(|e| e.values.len())
            .sum();
        assert_eq!(counts.denoiser, walked);
        assert!(counts.denoiser > 100_000, "default model suspiciously small");
    }
}
