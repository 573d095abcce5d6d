//! Layout conditioning: location-bin quantization, the prompt
//! "An image with (cat,<tl><br>,[attr])", a fixed vocabulary, and the token
//! encoder (trainable embedding table with 2D sine-cosine initialized
//! location rows plus one self-attention block).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pa_attr::{AttributeStrategy, AttributedObject, PerceptionAttribute};
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;
use crate::scenegen::{BBox, Category};
use crate::init;

pub const FIXED_WORDS: [&str; 6] = ["an", "image", "with", "(", ")", ","];
pub const ATTRIBUTE_TOKENS: [PerceptionAttribute; 3] = [
    PerceptionAttribute::Easy,
    PerceptionAttribute::Hard,
    PerceptionAttribute::Background,
];
pub const MAX_OBJECTS: usize = 8;
/// 3 prompt words + 8 objects x 6 tokens + 1 margin.
pub const MAX_SEQ_LEN: usize = 52;
pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_DIM: usize = 64;

fn attr_token(a: PerceptionAttribute) -> String {
    format!("[{}]", a.as_str())
}

/// Ordered token table: fixed words, categories, attributes, N^2 location
/// tokens, then `<null>` and `<pad>`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    categories: Vec<Category>,
    n_bins: usize,
}

impl Vocabulary {
    pub fn new(categories: &[Category], n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Conditioning(format!("n_bins {n_bins} < 2")));
        }
        if categories.is_empty() {
            return Err(Error::Conditioning("no categories".into()));
        }
        let mut tokens: Vec<String> = FIXED_WORDS.iter().map(|s| s.to_string()).collect();
        tokens.extend(categories.iter().map(|c| c.as_str().to_string()));
        tokens.extend(ATTRIBUTE_TOKENS.iter().map(|a| attr_token(*a)));
        for b in 0..n_bins * n_bins {
            tokens.push(format!("<{b}>"));
        }
        tokens.push("<null>".into());
        tokens.push("<pad>".into());
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Conditioning(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index, categories: categories.to_vec(), n_bins })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Conditioning(format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Conditioning(format!("token id {id} out of range")))
    }

    /// Id of the location token for a flattened row-major bin index.
    pub fn location_id(&self, bin: usize) -> Result<usize> {
        let n2 = self.n_bins * self.n_bins;
        if bin >= n2 {
            return Err(Error::Conditioning(format!("bin {bin} outside 0..{n2}")));
        }
        Ok(FIXED_WORDS.len() + self.categories.len() + ATTRIBUTE_TOKENS.len() + bin)
    }

    /// Inverse of [`Self::location_id`]; None for non-location ids.
    pub fn bin_of_id(&self, id: usize) -> Option<usize> {
        let start = FIXED_WORDS.len() + self.categories.len() + ATTRIBUTE_TOKENS.len();
        let n2 = self.n_bins * self.n_bins;
        (start..start + n2).contains(&id).then(|| id - start)
    }

    pub fn category_id(&self, cat: Category) -> Result<usize> {
        self.id(cat.as_str())
    }

    pub fn attribute_id(&self, attr: PerceptionAttribute) -> Result<usize> {
        self.id(&attr_token(attr))
    }

    pub fn null_id(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn pad_id(&self) -> usize {
        self.tokens.len() - 1
    }

    /// One token per line, in id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Quantize a box into row-major (top-left, bottom-right) bin indices.
/// The bottom-right corner uses ceil-minus-one so exact bin boundaries map
/// to the last interior bin.
pub fn quantize_box(
    bbox: &BBox,
    image_w: usize,
    image_h: usize,
    n: usize,
) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::Conditioning(format!("n {n} < 2")));
    }
    if !bbox.is_valid() {
        return Err(Error::Conditioning(format!("degenerate bbox {bbox:?}")));
    }
    let (w, h) = (image_w as f32, image_h as f32);
    let b = bbox.clamped(w, h);
    if !b.is_valid() {
        return Err(Error::Conditioning(format!("bbox {bbox:?} outside {image_w}x{image_h}")));
    }
    let nf = n as f32;
    let floor_bin = |coord: f32, extent: f32| ((coord / extent * nf) as usize).min(n - 1);
    let ceil_bin = |coord: f32, extent: f32| {
        ((coord / extent * nf).ceil() as usize).saturating_sub(1).min(n - 1)
    };
    let tl_row = floor_bin(b.y_min, h);
    let tl_col = floor_bin(b.x_min, w);
    let br_row = ceil_bin(b.y_max, h);
    let br_col = ceil_bin(b.x_max, w);
    debug_assert!(tl_row <= br_row && tl_col <= br_col);
    Ok((tl_row * n + tl_col, br_row * n + br_col))
}

/// Pixel rectangle covered by a bin (used to bound quantization error).
pub fn bin_rect(bin: usize, image_w: usize, image_h: usize, n: usize) -> BBox {
    let (row, col) = (bin / n, bin % n);
    let bw = image_w as f32 / n as f32;
    let bh = image_h as f32 / n as f32;
    BBox::new(col as f32 * bw, row as f32 * bh, (col + 1) as f32 * bw, (row + 1) as f32 * bh)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutObject {
    pub category: Category,
    pub tl_bin: usize,
    pub br_bin: usize,
    pub attribute: PerceptionAttribute,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedLayout {
    pub objects: Vec<LayoutObject>,
    pub image_w: usize,
    pub image_h: usize,
    pub strategy: AttributeStrategy,
}

impl AnnotatedLayout {
    /// Human-readable prompt string; `parse_prompt` inverts it.
    pub fn display(&self) -> String {
        let parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| {
                format!(
                    "({},<{}><{}>,[{}])",
                    o.category.as_str(),
                    o.tl_bin,
                    o.br_bin,
                    o.attribute.as_str()
                )
            })
            .collect();
        format!("An image with {}", parts.join(","))
    }

    /// Unpadded token ids: `an image with` then
    /// `( cat <tl> <br> [attr] )` per object.
    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let mut ids = vec![vocab.id("an")?, vocab.id("image")?, vocab.id("with")?];
        for o in &self.objects {
            ids.push(vocab.id("(")?);
            ids.push(vocab.category_id(o.category)?);
            ids.push(vocab.location_id(o.tl_bin)?);
            ids.push(vocab.location_id(o.br_bin)?);
            ids.push(vocab.attribute_id(o.attribute)?);
            ids.push(vocab.id(")")?);
        }
        Ok(ids)
    }
}

/// Quantize attributed objects into a layout and its display prompt.
pub fn build_prompt(
    objects: &[AttributedObject],
    image_w: usize,
    image_h: usize,
    vocab: &Vocabulary,
    strategy: AttributeStrategy,
) -> Result<(AnnotatedLayout, String)> {
    if objects.is_empty() {
        return Err(Error::Conditioning("cannot build a prompt with zero objects".into()));
    }
    if objects.len() > MAX_OBJECTS {
        return Err(Error::Conditioning(format!(
            "{} objects exceed the {MAX_OBJECTS}-object sequence budget",
            objects.len()
        )));
    }
    let mut layout_objects = Vec::with_capacity(objects.len());
    for o in objects {
        if !vocab.categories.contains(&o.category) {
            return Err(Error::Conditioning(format!(
                "category {} not in vocabulary",
                o.category.as_str()
            )));
        }
        let (tl_bin, br_bin) = quantize_box(&o.bbox, image_w, image_h, vocab.n_bins)?;
        layout_objects.push(LayoutObject {
            category: o.category,
            tl_bin,
            br_bin,
            attribute: o.attribute,
        });
    }
    let layout = AnnotatedLayout { objects: layout_objects, image_w, image_h, strategy };
    let display = layout.display();
    Ok((layout, display))
}

/// Strict parser for the prompt grammar; accepts exactly the strings
/// `display` emits (modulo image size / strategy, which the string does not
/// carry).
pub fn parse_prompt(s: &str, vocab: &Vocabulary) -> Result<Vec<LayoutObject>> {
    let fail = |msg: &str| Error::Conditioning(format!("parse error: {msg} in `{s}`"));
    let body = s
        .strip_prefix("An image with ")
        .ok_or_else(|| fail("missing `An image with ` prefix"))?;
    if body.is_empty() {
        return Err(fail("no objects"));
    }
    let mut out = Vec::new();
    let mut rest = body;
    loop {
        if !rest.starts_with('(') {
            return Err(fail("expected `(`"));
        }
        let close = rest.find(')').ok_or_else(|| fail("unbalanced `(`"))?;
        let inner = &rest[1..close];
        let mut fields = inner.split(',');
        let cat = fields.next().ok_or_else(|| fail("missing category"))?;
        let loc = fields.next().ok_or_else(|| fail("missing location"))?;
        let attr = fields.next().ok_or_else(|| fail("missing attribute"))?;
        if fields.next().is_some() {
            return Err(fail("too many fields"));
        }
        let category = Category::from_str(cat).ok_or_else(|| fail("unknown category"))?;
        if !vocab.categories.contains(&category) {
            return Err(fail("category not in vocabulary"));
        }
        let loc = loc.strip_prefix('<').ok_or_else(|| fail("location must start with `<`"))?;
        let (tl, rest_loc) = loc.split_once('>').ok_or_else(|| fail("unclosed `<`"))?;
        let br = rest_loc
            .strip_prefix('<')
            .and_then(|r| r.strip_suffix('>'))
            .ok_or_else(|| fail("malformed bottom-right bin"))?;
        let parse_bin = |t: &str| -> Result<usize> {
            let v: usize = t.parse().map_err(|_| fail("bin is not a number"))?;
            if v >= vocab.n_bins * vocab.n_bins {
                return Err(fail("bin out of range"));
            }
            Ok(v)
        };
        let tl_bin = parse_bin(tl)?;
        let br_bin = parse_bin(br)?;
        let attr_name = attr
            .strip_prefix('[')
            .and_then(|a| a.strip_suffix(']'))
            .ok_or_else(|| fail("attribute must be bracketed"))?;
        let attribute = ATTRIBUTE_TOKENS
            .into_iter()
            .find(|a| a.as_str() == attr_name)
            .ok_or_else(|| fail("unknown attribute"))?;
        out.push(LayoutObject { category, tl_bin, br_bin, attribute });
        rest = &rest[close + 1..];
        if rest.is_empty() {
            break;
        }
        rest = rest.strip_prefix(',').ok_or_else(|| fail("objects must be comma-separated"))?;
        if rest.is_empty() {
            return Err(fail("trailing comma"));
        }
    }
    if out.len() > MAX_OBJECTS {
        return Err(fail("too many objects"));
    }
    Ok(out)
}

/// Padded token ids plus a 1/0 keep mask, both of length [`MAX_SEQ_LEN`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTokens {
    pub ids: Vec<usize>,
    pub mask: Vec<f32>,
}

impl ConditionTokens {
    fn from_ids(mut ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if ids.len() > MAX_SEQ_LEN {
            return Err(Error::Conditioning(format!(
                "{} tokens exceed max sequence length {MAX_SEQ_LEN}",
                ids.len()
            )));
        }
        let mut mask = vec![1.0; ids.len()];
        mask.resize(MAX_SEQ_LEN, 0.0);
        ids.resize(MAX_SEQ_LEN, vocab.pad_id());
        Ok(Self { ids, mask })
    }
}

/// Tokens for a layout condition.
pub fn layout_condition(layout: &AnnotatedLayout, vocab: &Vocabulary) -> Result<ConditionTokens> {
    ConditionTokens::from_ids(layout.token_ids(vocab)?, vocab)
}

/// The unconditional branch: a single `<null>` token.
pub fn null_condition(vocab: &Vocabulary) -> ConditionTokens {
    ConditionTokens::from_ids(vec![vocab.null_id()], vocab).expect("null fits")
}

/// 2D sine-cosine positional code: first half encodes `row`, second half
/// `col`, each as interleaved (sin, cos) pairs over a geometric frequency
/// ladder. `d` must be a multiple of 4.
pub fn sincos_2d(row: usize, col: usize, d: usize) -> Vec<f32> {
    assert!(d % 4 == 0, "sincos dim {d} must be a multiple of 4");
    let q = d / 4;
    let mut out = vec![0.0f32; d];
    for i in 0..q {
        let omega = 1.0 / 10000f64.powf(i as f64 / q as f64);
        let r = row as f64 * omega;
        let c = col as f64 * omega;
        out[2 * i] = r.sin() as f32;
        out[2 * i + 1] = r.cos() as f32;
        out[d / 2 + 2 * i] = c.sin() as f32;
        out[d / 2 + 2 * i + 1] = c.cos() as f32;
    }
    out
}

/// Add the condition-encoder parameters to a store: embedding table (with
/// sincos-initialized location rows), self-attention projections, and a
/// small residual MLP. All rows are trainable.
pub fn init_cond_params(
    store: &mut ParamStore,
    vocab: &Vocabulary,
    d: usize,
    seed: u64,
) -> Result<()> {
    if d % 4 != 0 {
        return Err(Error::Conditioning(format!("embedding dim {d} must be a multiple of 4")));
    }
    let mut rng = stream(seed, "cond-init", 0);
    let v = vocab.size();
    let mut table = init::normal(&mut rng, v * d, 0.02);
    for bin in 0..vocab.n_bins * vocab.n_bins {
        let id = vocab.location_id(bin)?;
        let code = sincos_2d(bin / vocab.n_bins, bin % vocab.n_bins, d);
        table[id * d..(id + 1) * d].copy_from_slice(&code);
    }
    store.add("cond/table", table, &[v, d])?;
    for name in ["wq", "wk", "wv", "wo"] {
        store.add(&format!("cond/attn.{name}"), init::he_linear(&mut rng, d, d), &[d, d])?;
    }
    store.add("cond/mlp.w1", init::he_linear(&mut rng, d, 2 * d), &[d, 2 * d])?;
    store.add("cond/mlp.b1", init::zeros(2 * d), &[2 * d])?;
    store.add("cond/mlp.w2", init::he_linear(&mut rng, 2 * d, d), &[2 * d, d])?;
    store.add("cond/mlp.b2", init::zeros(d), &[d])?;
    Ok(())
}

/// Additive attention mask `[rows, L]`: 0 where the key token is real,
/// -1e9 where padded.
pub fn additive_mask(tape: &mut Tape, mask: &[f32], rows: usize) -> Result<Var> {
    let l = mask.len();
    let mut vals = Vec::with_capacity(rows * l);
    for _ in 0..rows {
        vals.extend(mask.iter().map(|m| (m - 1.0) * 1e9));
    }
    tape.leaf(vals, &[rows, l])
}

/// Encode condition tokens into a `[L, D]` sequence on the tape: embedding
/// lookup, one masked self-attention block, and a residual MLP.
pub fn encode_condition(
    tape: &mut Tape,
    bound: &BoundParams,
    store: &ParamStore,
    tokens: &ConditionTokens,
) -> Result<Var> {
    let var = |name: &str| -> Result<Var> {
        store
            .id(name)
            .map(|id| bound.var(id))
            .ok_or_else(|| Error::Conditioning(format!("missing parameter {name}")))
    };
    let table = var("cond/table")?;
    let x = tape.embed(table, &tokens.ids)?;
    let l = tokens.ids.len();
    let q = tape.matmul(x, var("cond/attn.wq")?)?;
    let k = tape.matmul(x, var("cond/attn.wk")?)?;
    let v = tape.matmul(x, var("cond/attn.wv")?)?;
    let mask = additive_mask(tape, &tokens.mask, l)?;
    let att = tape.attention(q, k, v, Some(mask))?;
    let att = tape.matmul(att, var("cond/attn.wo")?)?;
    let h = tape.add(x, att)?;
    let m = tape.matmul(h, var("cond/mlp.w1")?)?;
    let m = tape.bias_add_row(m, var("cond/mlp.b1")?)?;
    let m = tape.silu(m)?;
    let m = tape.matmul(m, var("cond/mlp.w2")?)?;
    let m = tape.bias_add_row(m, var("cond/mlp.b2")?)?;
    tape.add(h, m)
}
