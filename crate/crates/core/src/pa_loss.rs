//! Perception-aware loss: multi-scale tap fusion, a per-object segmentation
//! head driven by the condition vocabulary, mask (BCE) + dice terms, the
//! timestep-scaled perception loss, and the total training objective.

use crate::autodiff::{Tape, Var};
use crate::conditioning::Vocabulary;
use crate::error::{Error, Result};
use crate::init;
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;
use crate::schedule::Schedule;

pub const DEFAULT_FEAT_CHANNELS: usize = 32;
pub const DEFAULT_LAMBDA: f32 = 0.01;
pub const DEFAULT_DICE_EPS: f32 = 1.0;

/// Toggles for the perception-loss arm and its ablations.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaLossConfig {
    /// Weight of the perception loss in the total objective.
    pub lambda: f32,
    /// Scale the perception loss by sqrt(alpha_bar_t); ablation sets false.
    pub timestep_scale: bool,
    /// Include the dice term; ablation sets false.
    pub use_dice: bool,
    /// Dice smoothing, in pixel-count units.
    pub dice_eps: f32,
    /// Fused feature width C_f.
    pub feat_channels: usize,
}

impl Default for PaLossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            timestep_scale: true,
            use_dice: true,
            dice_eps: DEFAULT_DICE_EPS,
            feat_channels: DEFAULT_FEAT_CHANNELS,
        }
    }
}

impl PaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Pipeline(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Pipeline(format!("dice_eps {} must be > 0", self.dice_eps)));
        }
        if self.feat_channels == 0 {
            return Err(Error::Pipeline("feat_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Register the `seg/*` parameters: three fusion convs (one per fusion step),
/// and the 1x1 projection that maps fused features into the query space.
pub fn init_seg_params(
    store: &mut ParamStore,
    base_channels: usize,
    cond_dim: usize,
    feat_channels: usize,
    seed: u64,
) -> Result<()> {
    let (c, cf, d) = (base_channels, feat_channels, cond_dim);
    let mut rng = stream(seed, "seg-init", 0);
    for (name, cin) in [
        ("seg/fuse2", 4 * c + 8 * c),
        ("seg/fuse3", 2 * c + cf),
        ("seg/fuse4", c + cf),
    ] {
        store.add(&format!("{name}.w"), init::he_conv(&mut rng, cf, cin, 3), &[cf, cin, 3, 3])?;
        store.add(&format!("{name}.b"), init::zeros(cf), &[cf])?;
    }
    store.add("seg/proj.w", init::he_conv(&mut rng, d, cf, 1), &[d, cf, 1, 1])?;
    store.add("seg/proj.b", init::zeros(d), &[d])?;
    Ok(())
}

fn pvar(store: &ParamStore, bound: &BoundParams, name: &str) -> Result<Var> {
    store
        .id(name)
        .map(|id| bound.var(id))
        .ok_or_else(|| Error::Pipeline(format!("missing parameter {name}")))
}

/// Validate the tap resolution ladder: four [1,*,h,w] maps whose spatial size
/// doubles at each step.
fn check_ladder(tape: &Tape, taps: &[Var; 4]) -> Result<(usize, usize)> {
    let mut dims = Vec::with_capacity(4);
    for (i, &t) in taps.iter().enumerate() {
        let s = tape.shape(t);
        if s.len() != 4 || s[0] != 1 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Pipeline(format!("tap {i} has shape {s:?}, expected [1,c,h,w]")));
        }
        dims.push((s[2], s[3]));
    }
    for i in 1..4 {
        if dims[i].0 != 2 * dims[i - 1].0 || dims[i].1 != 2 * dims[i - 1].1 {
            return Err(Error::Pipeline(format!(
                "tap ladder violation: tap {} is {:?}, tap {} is {:?}",
                i - 1,
                dims[i - 1],
                i,
                dims[i]
            )));
        }
    }
    Ok(dims[3])
}

/// Multi-scale fusion: F1 = f1, then for n = 2,3,4 the previous level is 2x
/// nearest-upsampled, channel-concatenated after f_n, and passed through a
/// 3x3 conv. Returns F4 at full resolution.
pub fn fuse_features(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &BoundParams,
    taps: &[Var; 4],
) -> Result<Var> {
    check_ladder(tape, taps)?;
    let mut f = taps[0];
    for (n, name) in [(1usize, "seg/fuse2"), (2, "seg/fuse3"), (3, "seg/fuse4")] {
        let w = pvar(store, bound, &format!("{name}.w"))?;
        let b = pvar(store, bound, &format!("{name}.b"))?;
        let up = tape.upsample_2x(f)?;
        let cat = tape.concat_channels(taps[n], up)?;
        let conv = tape.conv2d(cat, w, 1, 1)?;
        f = tape.bias_add_channel(conv, b)?;
    }
    Ok(f)
}

/// Per-object mask logits in prompt order.
pub struct MaskPrediction {
    /// `[k, h*w]` logits, row i for layout object i.
    pub logits: Var,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

/// One query per conditioned object (mean of its category, location and
/// attribute token embeddings); logits are per-pixel dot products between the
/// projected fused feature and each query.
pub fn seg_head(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &BoundParams,
    fused: Var,
    layout: &crate::conditioning::AnnotatedLayout,
    vocab: &Vocabulary,
) -> Result<MaskPrediction> {
    let k = layout.objects.len();
    if k == 0 {
        return Err(Error::Pipeline("seg_head needs a nonempty layout".into()));
    }
    let fshape = tape.shape(fused).to_vec();
    if fshape.len() != 4 || fshape[0] != 1 {
        return Err(Error::Pipeline(format!("fused shape {fshape:?}, expected [1,c,h,w]")));
    }
    let (h, w) = (fshape[2], fshape[3]);

    let mut ids = Vec::with_capacity(4 * k);
    for o in &layout.objects {
        ids.push(vocab.category_id(o.category)?);
        ids.push(vocab.location_id(o.tl_bin)?);
        ids.push(vocab.location_id(o.br_bin)?);
        ids.push(vocab.attribute_id(o.attribute)?);
    }
    let table = pvar(store, bound, "cond/table")?;
    let tok = tape.embed(table, &ids)?;
    // Fixed averaging matrix: query i = mean of its own four token rows.
    let mut avg = vec![0.0f32; k * 4 * k];
    for i in 0..k {
        for j in 0..4 {
            avg[i * 4 * k + 4 * i + j] = 0.25;
        }
    }
    let avg = tape.leaf(avg, &[k, 4 * k])?;
    let queries = tape.matmul(avg, tok)?;

    let pw = pvar(store, bound, "seg/proj.w")?;
    let pb = pvar(store, bound, "seg/proj.b")?;
    let proj = tape.conv2d(fused, pw, 1, 0)?;
    let proj = tape.bias_add_channel(proj, pb)?;
    let d = tape.shape(proj)[1];
    let rows = tape.reshape(proj, &[d, h * w])?;
    let rows = tape.transpose(rows)?;
    let qt = tape.transpose(queries)?;
    let logits = tape.matmul(rows, qt)?;
    let logits = tape.transpose(logits)?;
    Ok(MaskPrediction { logits, k, h, w })
}

/// Binary GT masks matching a `MaskPrediction`, flattened row-major.
pub fn mask_targets(tape: &mut Tape, pred: &MaskPrediction, gt: &[Vec<f32>]) -> Result<Var> {
    if gt.len() != pred.k {
        return Err(Error::Pipeline(format!(
            "got {} GT masks for {} predicted objects",
            gt.len(),
            pred.k
        )));
    }
    let px = pred.h * pred.w;
    let mut flat = Vec::with_capacity(pred.k * px);
    for (i, m) in gt.iter().enumerate() {
        if m.len() != px {
            return Err(Error::Pipeline(format!(
                "GT mask {i} has {} pixels, expected {px}",
                m.len()
            )));
        }
        flat.extend_from_slice(m);
    }
    tape.leaf(flat, &[pred.k, px])
}

/// Per-pixel BCE with logits, averaged over pixels and objects.
pub fn mask_loss(tape: &mut Tape, pred: &MaskPrediction, targets: Var) -> Result<Var> {
    tape.bce_with_logits(pred.logits, targets)
}

/// `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`, averaged over objects.
pub fn dice_loss(tape: &mut Tape, pred: &MaskPrediction, targets: Var, eps: f32) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::Pipeline(format!("dice eps {eps} must be > 0")));
    }
    let probs = tape.sigmoid(pred.logits)?;
    let inter = tape.mul(probs, targets)?;
    let si = tape.sum_rows(inter)?;
    let sp = tape.sum_rows(probs)?;
    let sg = tape.sum_rows(targets)?;
    let num = tape.scale(si, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean_all(ratio)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Eq.-style perception loss: `scale * (mask_l + dice_l)` where the scale is
/// `sqrt(alpha_bar_t)`, or 1 when the timestep scaling is ablated.
pub fn perception_loss(
    tape: &mut Tape,
    mask_l: Var,
    dice_l: Option<Var>,
    t: usize,
    sched: &Schedule,
    timestep_scale: bool,
) -> Result<Var> {
    let both = match dice_l {
        Some(d) => tape.add(mask_l, d)?,
        None => mask_l,
    };
    let s = if timestep_scale { sched.loss_scale(t) as f32 } else { 1.0 };
    tape.scale(both, s)
}

/// Total objective: `ldm_l + lambda * p_l`.
pub fn total_loss(tape: &mut Tape, ldm_l: Var, p_l: Var, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Pipeline(format!("lambda {lambda} must be >= 0")));
    }
    let scaled = tape.scale(p_l, lambda)?;
    tape.add(ldm_l, scaled)
}
