//! Multi-head cross and self attention, with every control variant:
//!
//! * baseline: `M = softmax(Q Kᵀ / √d)`, `z = l_O(M V)`
//! * concatenated control: `M = λ ⊙ softmax(Q Kᵀ / √d) ⊙ B`, weights applied
//!   per token column after the softmax, no renormalization
//! * substring fast path: caption columns inside a region span are masked in
//!   place
//! * averaged outputs: each prompt attended separately, layer outputs averaged
//!
//! Masks are shared by all heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layout::{ConcatMask, LayerDims, LayerId};
use crate::numerics::{matmul, matmul_transposed, softmax_rows, Matrix};
use crate::text::ConcatenatedPrompt;

/// Projections of one attention layer, row-vector convention (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub dims: LayerDims,
    pub heads: usize,
    pub query_dim: usize,
    pub value_dim: usize,
    pub model_dim: usize,
    /// Input width of `l_K`/`l_V`: the text embedding width for cross
    /// attention, `model_dim` for self attention.
    pub key_in_dim: usize,
    /// `model_dim x heads·query_dim`
    pub w_q: Matrix,
    /// `key_in_dim x heads·query_dim`
    pub w_k: Matrix,
    /// `key_in_dim x heads·value_dim`
    pub w_v: Matrix,
    /// `heads·value_dim x model_dim`
    pub w_o: Matrix,
}

impl AttentionLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dims: LayerDims,
        heads: usize,
        query_dim: usize,
        value_dim: usize,
        model_dim: usize,
        key_in_dim: usize,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
    ) -> Result<Self> {
        contract!(
            heads >= 1 && query_dim >= 1 && value_dim >= 1,
            "empty head config"
        );
        contract!(
            w_q.shape() == (model_dim, heads * query_dim),
            "l_Q is {:?}, expected {:?}",
            w_q.shape(),
            (model_dim, heads * query_dim)
        );
        contract!(
            w_k.shape() == (key_in_dim, heads * query_dim),
            "l_K is {:?}, expected {:?}",
            w_k.shape(),
            (key_in_dim, heads * query_dim)
        );
        contract!(
            w_v.shape() == (key_in_dim, heads * value_dim),
            "l_V is {:?}, expected {:?}",
            w_v.shape(),
            (key_in_dim, heads * value_dim)
        );
        contract!(
            w_o.shape() == (heads * value_dim, model_dim),
            "l_O is {:?}, expected {:?}",
            w_o.shape(),
            (heads * value_dim, model_dim)
        );
        Ok(Self {
            dims,
            heads,
            query_dim,
            value_dim,
            model_dim,
            key_in_dim,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Gaussian init scaled by `1/√fan_in`, reproducible from `seed`.
    pub fn seeded(
        dims: LayerDims,
        heads: usize,
        query_dim: usize,
        value_dim: usize,
        model_dim: usize,
        key_in_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_q = gaussian(&mut rng, model_dim, heads * query_dim);
        let w_k = gaussian(&mut rng, key_in_dim, heads * query_dim);
        let w_v = gaussian(&mut rng, key_in_dim, heads * value_dim);
        let w_o = gaussian(&mut rng, heads * value_dim, model_dim);
        Self::new(
            dims, heads, query_dim, value_dim, model_dim, key_in_dim, w_q, w_k, w_v, w_o,
        )
        .expect("consistent seeded dims")
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.query_dim as f64).sqrt()
    }

    fn check_query(&self, z: &Matrix) -> Result<()> {
        contract!(
            z.shape() == (self.dims.pixels(), self.model_dim),
            "layer {:?} expects z of {}x{}, got {:?}",
            self.dims.id,
            self.dims.pixels(),
            self.model_dim,
            z.shape()
        );
        Ok(())
    }

    fn check_keys(&self, e: &Matrix) -> Result<()> {
        contract!(
            e.cols() == self.key_in_dim,
            "layer {:?} expects key inputs of width {}, got {}",
            self.dims.id,
            self.key_in_dim,
            e.cols()
        );
        contract!(e.rows() >= 1, "attention over zero keys");
        Ok(())
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let s = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            s * x
        })
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("gaussian shape")
}

/// Per-layer, per-step attention map `h x (H·W) x N`, head-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: LayerId,
    pub step: usize,
    pub heads: usize,
    pub pixels: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl AttentionRecord {
    pub fn from_heads(layer: LayerId, maps: &[Matrix]) -> Self {
        let (pixels, tokens) = maps.first().map_or((0, 0), |m| m.shape());
        let mut data = Vec::with_capacity(maps.len() * pixels * tokens);
        for m in maps {
            data.extend_from_slice(m.data());
        }
        Self {
            layer,
            step: 0,
            heads: maps.len(),
            pixels,
            tokens,
            data,
        }
    }

    #[inline]
    pub fn get(&self, head: usize, pixel: usize, token: usize) -> f64 {
        self.data[(head * self.pixels + pixel) * self.tokens + token]
    }

    pub fn head(&self, head: usize) -> Matrix {
        let n = self.pixels * self.tokens;
        Matrix::from_vec(
            self.pixels,
            self.tokens,
            self.data[head * n..(head + 1) * n].to_vec(),
        )
        .expect("record shape")
    }

    /// Head-averaged map, `(H·W) x N`.
    pub fn mean_over_heads(&self) -> Matrix {
        let mut out = Matrix::zeros(self.pixels, self.tokens);
        for h in 0..self.heads {
            out.add_assign(&self.head(h)).expect("record shape");
        }
        out.scale(1.0 / self.heads as f64)
    }
}

struct Projected {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn project(z: &Matrix, keys_in: &Matrix, p: &AttentionLayerParams) -> Result<Projected> {
    Ok(Projected {
        q: matmul(z, &p.w_q)?,
        k: matmul(keys_in, &p.w_k)?,
        v: matmul(keys_in, &p.w_v)?,
    })
}

/// Pre-mask softmax maps, one `(H·W) x N` matrix per head.
fn head_maps(pr: &Projected, p: &AttentionLayerParams) -> Result<Vec<Matrix>> {
    let d = p.query_dim;
    (0..p.heads)
        .map(|r| {
            let q = pr.q.col_block(r * d, d);
            let k = pr.k.col_block(r * d, d);
            let logits = matmul_transposed(&q, &k)?;
            Ok(softmax_rows(&logits, p.scale()))
        })
        .collect()
}

/// `l_O(concat_heads(M_r V_r))`.
fn combine(maps: &[Matrix], v: &Matrix, p: &AttentionLayerParams) -> Result<Matrix> {
    let dv = p.value_dim;
    let per_head = maps
        .iter()
        .enumerate()
        .map(|(r, m)| matmul(m, &v.col_block(r * dv, dv)))
        .collect::<Result<Vec<_>>>()?;
    matmul(&Matrix::hconcat(&per_head)?, &p.w_o)
}

/// Plain cross attention over one prompt.
pub fn cross_attention_baseline(
    z: &Matrix,
    text_embed: &Matrix,
    params: &AttentionLayerParams,
) -> Result<(Matrix, AttentionRecord)> {
    params.check_query(z)?;
    params.check_keys(text_embed)?;
    let pr = project(z, text_embed, params)?;
    let maps = head_maps(&pr, params)?;
    let out = combine(&maps, &pr.v, params)?;
    Ok((out, AttentionRecord::from_heads(params.dims.id, &maps)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacOptions {
    /// Divide each masked row by its sum. Off by default: masked rows are
    /// allowed to sum to less than one.
    pub renormalize: bool,
}

/// Masked, weighted cross attention over a concatenated prompt.
pub fn cac_cross_attention(
    z: &Matrix,
    prompt: &ConcatenatedPrompt,
    embeds: &Matrix,
    mask: &ConcatMask,
    params: &AttentionLayerParams,
) -> Result<(Matrix, AttentionRecord)> {
    cac_cross_attention_with(z, prompt, embeds, mask, params, CacOptions::default())
}

pub fn cac_cross_attention_with(
    z: &Matrix,
    prompt: &ConcatenatedPrompt,
    embeds: &Matrix,
    mask: &ConcatMask,
    params: &AttentionLayerParams,
    opts: CacOptions,
) -> Result<(Matrix, AttentionRecord)> {
    params.check_query(z)?;
    params.check_keys(embeds)?;
    let n = prompt.total_len();
    contract!(
        embeds.rows() == n,
        "{} embedding rows for {} prompt tokens",
        embeds.rows(),
        n
    );
    contract!(
        mask.layer == params.dims.id,
        "mask for layer {:?} used at layer {:?}",
        mask.layer,
        params.dims.id
    );
    contract!(
        mask.matrix.shape() == (params.dims.pixels(), n),
        "mask is {:?}, expected {:?}",
        mask.matrix.shape(),
        (params.dims.pixels(), n)
    );
    let lambdas = prompt.lambdas();
    let pr = project(z, embeds, params)?;
    let mut maps = head_maps(&pr, params)?;
    for m in maps.iter_mut() {
        apply_control(m, lambdas, &mask.matrix, opts);
    }
    let out = combine(&maps, &pr.v, params)?;
    Ok((out, AttentionRecord::from_heads(params.dims.id, &maps)))
}

/// `m[j,k] <- (m[j,k] · λ_k) · B[j,k]`, in that order.
fn apply_control(m: &mut Matrix, lambdas: &[f64], mask: &Matrix, opts: CacOptions) {
    let n = m.cols();
    for j in 0..m.rows() {
        let b = mask.row(j);
        let row = m.row_mut(j);
        for k in 0..n {
            row[k] = (row[k] * lambdas[k]) * b[k];
        }
        if opts.renormalize {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstringCombine {
    /// Span columns are replaced by their masked versions; other columns keep
    /// the caption attention.
    #[default]
    Replace,
    /// `M_0 + Σ_i M_0 ⊙ B_i`, counting span columns twice.
    LiteralSum,
}

/// Caption-only attention with region masks applied to the caption's own
/// token spans.
pub fn substring_cac_attention(
    z: &Matrix,
    caption_embed: &Matrix,
    span_masks: &[ConcatMask],
    params: &AttentionLayerParams,
) -> Result<(Matrix, AttentionRecord)> {
    substring_cac_attention_with(
        z,
        caption_embed,
        span_masks,
        params,
        SubstringCombine::Replace,
    )
}

pub fn substring_cac_attention_with(
    z: &Matrix,
    caption_embed: &Matrix,
    span_masks: &[ConcatMask],
    params: &AttentionLayerParams,
    combine_mode: SubstringCombine,
) -> Result<(Matrix, AttentionRecord)> {
    params.check_query(z)?;
    params.check_keys(caption_embed)?;
    let n0 = caption_embed.rows();
    let mut spans = Vec::with_capacity(span_masks.len());
    for m in span_masks {
        contract!(
            m.matrix.shape() == (params.dims.pixels(), n0),
            "span mask is {:?}, expected {:?}",
            m.matrix.shape(),
            (params.dims.pixels(), n0)
        );
        contract!(
            m.layer == params.dims.id,
            "span mask for layer {:?} used at layer {:?}",
            m.layer,
            params.dims.id
        );
        let span = m
            .span
            .ok_or_else(|| crate::Error::Contract("substring path needs span masks".into()))?;
        contract!(span.0 + span.1 <= n0, "span {:?} outside caption", span);
        spans.push(span);
    }
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        contract!(
            w[0].0 + w[0].1 <= w[1].0,
            "overlapping spans {:?} and {:?}",
            w[0],
            w[1]
        );
    }

    let pr = project(z, caption_embed, params)?;
    let mut maps = head_maps(&pr, params)?;
    for m in maps.iter_mut() {
        let base = m.clone();
        for (mask, &(start, len)) in span_masks.iter().zip(&spans) {
            for j in 0..m.rows() {
                for k in start..start + len {
                    let masked = base.get(j, k) * mask.matrix.get(j, k);
                    match combine_mode {
                        SubstringCombine::Replace => m.set(j, k, masked),
                        SubstringCombine::LiteralSum => m.set(j, k, m.get(j, k) + masked),
                    }
                }
            }
        }
    }
    let out = combine(&maps, &pr.v, params)?;
    Ok((out, AttentionRecord::from_heads(params.dims.id, &maps)))
}

/// Averages `l_O(M_i V_i)` over the caption and every region prompt, each
/// attended on its own without spatial masks. The record concatenates the
/// per-prompt maps along the token axis.
pub fn compose_average_outputs(
    z: &Matrix,
    caption_embed: &Matrix,
    region_embeds: &[Matrix],
    params: &AttentionLayerParams,
) -> Result<(Matrix, AttentionRecord)> {
    let (mut acc, first) = cross_attention_baseline(z, caption_embed, params)?;
    let mut head_blocks: Vec<Vec<Matrix>> =
        (0..params.heads).map(|h| vec![first.head(h)]).collect();
    for e in region_embeds {
        let (out, rec) = cross_attention_baseline(z, e, params)?;
        acc.add_assign(&out)?;
        for (h, blocks) in head_blocks.iter_mut().enumerate() {
            blocks.push(rec.head(h));
        }
    }
    let count = (region_embeds.len() + 1) as f64;
    let out = if region_embeds.is_empty() {
        acc
    } else {
        acc.scale(1.0 / count)
    };
    let maps = head_blocks
        .iter()
        .map(|b| Matrix::hconcat(b))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, AttentionRecord::from_heads(params.dims.id, &maps)))
}

/// Multi-head self attention with queries, keys and values all from `z`.
pub fn self_attention(z: &Matrix, params: &AttentionLayerParams) -> Result<Matrix> {
    params.check_query(z)?;
    params.check_keys(z)?;
    let pr = project(z, z, params)?;
    let maps = head_maps(&pr, params)?;
    combine(&maps, &pr.v, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{assemble_concat_mask, assemble_substring_mask, build_mask_pyramid};
    use crate::numerics::{Grid, ResizeMode};
    use crate::text::{concat_prompts, embed, tokenize, Vocabulary};

    fn dims(h: usize, w: usize) -> LayerDims {
        LayerDims {
            id: LayerId(0),
            height: h,
            width: w,
        }
    }

    /// h = 1, d = 1, one pixel, `l_Q = [1]`, `l_K = l_V = I`, `l_O = [1]`.
    fn scalar_params() -> AttentionLayerParams {
        AttentionLayerParams::new(
            dims(1, 1),
            1,
            1,
            1,
            1,
            1,
            Matrix::identity(1),
            Matrix::identity(1),
            Matrix::identity(1),
            Matrix::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn single_key_attention_is_one() {
        let p = scalar_params();
        let z = Matrix::from_rows(&[&[0.3]]);
        let e = Matrix::from_rows(&[&[5.0]]);
        let (out, rec) = cross_attention_baseline(&z, &e, &p).unwrap();
        assert_eq!(rec.data, vec![1.0]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let p = AttentionLayerParams::seeded(dims(2, 1), 2, 3, 2, 4, 5, 11);
        let z = Matrix::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[-1.0, 0.0, 2.0, 0.5]]);
        let row = [0.5, -0.25, 1.0, 2.0, 0.0];
        let e = Matrix::from_rows(&[&row, &row]);
        let (_, rec) = cross_attention_baseline(&z, &e, &p).unwrap();
        assert!(rec.data.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn scalar_baseline_oracle() {
        // Q = [1], K = [[1],[0]], V = K projected values [[2],[4]]: use separate
        // key/value weights so keys are (1, 0) and values (2, 4).
        let p = AttentionLayerParams::new(
            dims(1, 1),
            1,
            1,
            1,
            1,
            2,
            Matrix::identity(1),
            Matrix::from_rows(&[&[1.0], &[0.0]]),
            Matrix::from_rows(&[&[0.0], &[1.0]]),
            Matrix::identity(1),
        )
        .unwrap();
        let z = Matrix::from_rows(&[&[1.0]]);
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 4.0]]);
        let (out, rec) = cross_attention_baseline(&z, &e, &p).unwrap();
        let en = std::f64::consts::E;
        assert!((rec.data[0] - en / (en + 1.0)).abs() < 1e-15);
        assert!((rec.data[1] - 1.0 / (en + 1.0)).abs() < 1e-15);
        let expect = 2.0 * en / (en + 1.0) + 4.0 / (en + 1.0);
        assert!((out.get(0, 0) - expect).abs() < 1e-12);
        assert!((out.get(0, 0) - 2.538).abs() < 1e-3);
    }

    #[test]
    fn scalar_cac_oracle() {
        let v = Vocabulary::toy();
        // two tokens: a caption of BOS/EOS only is not tokenizable, so build
        // the prompt directly from weights
        let cap = tokenize("a", &v).unwrap();
        let prompt = concat_prompts(&cap, &[], 3, 1.0, 10.0, &v).unwrap();
        let prompt = prompt.with_lambdas(vec![1.0, 1.0, 1.0]).unwrap();
        let p = AttentionLayerParams::new(
            dims(1, 1),
            1,
            1,
            1,
            1,
            2,
            Matrix::identity(1),
            Matrix::from_rows(&[&[1.0], &[0.0]]),
            Matrix::from_rows(&[&[0.0], &[1.0]]),
            Matrix::identity(1),
        )
        .unwrap();
        let z = Matrix::from_rows(&[&[1.0]]);
        // third key is a copy of the second so the three-token prompt lines up
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 4.0], &[0.0, 4.0]]);
        let mask = ConcatMask {
            layer: LayerId(0),
            matrix: Matrix::from_rows(&[&[1.0, 0.0, 0.0]]),
            span: None,
        };
        let (out, rec) = cac_cross_attention(&z, &prompt, &e, &mask, &p).unwrap();
        let en = std::f64::consts::E;
        let a = en / (en + 2.0);
        assert!((rec.data[0] - a).abs() < 1e-15);
        assert_eq!(&rec.data[1..], &[0.0, 0.0]);
        assert!((out.get(0, 0) - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn two_token_cac_oracle() {
        // the two-token setting: Q = [1], K = [[1],[0]], B = [1, 0], λ = [1, 1]
        let p = AttentionLayerParams::new(
            dims(1, 1),
            1,
            1,
            1,
            1,
            2,
            Matrix::identity(1),
            Matrix::from_rows(&[&[1.0], &[0.0]]),
            Matrix::from_rows(&[&[0.0], &[1.0]]),
            Matrix::identity(1),
        )
        .unwrap();
        let z = Matrix::from_rows(&[&[1.0]]);
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 4.0]]);
        let pr = project(&z, &e, &p).unwrap();
        let mut maps = head_maps(&pr, &p).unwrap();
        apply_control(
            &mut maps[0],
            &[1.0, 1.0],
            &Matrix::from_rows(&[&[1.0, 0.0]]),
            CacOptions::default(),
        );
        let out = combine(&maps, &pr.v, &p).unwrap();
        let en = std::f64::consts::E;
        assert!((maps[0].get(0, 0) - en / (en + 1.0)).abs() < 1e-15);
        assert_eq!(maps[0].get(0, 1), 0.0);
        assert!((out.get(0, 0) - 1.462).abs() < 1e-3);
        assert!((out.get(0, 0) - 2.0 * en / (en + 1.0)).abs() < 1e-12);
    }

    fn scene_fixture() -> (
        Vocabulary,
        ConcatenatedPrompt,
        Matrix,
        AttentionLayerParams,
        Matrix,
    ) {
        let v = Vocabulary::toy();
        let cap = tokenize("a photo of a dog", &v).unwrap();
        let regions = vec![
            tokenize("red apple", &v).unwrap(),
            tokenize("boat", &v).unwrap(),
        ];
        let total = cap.len() + regions.iter().map(|r| r.len()).sum::<usize>();
        let prompt = concat_prompts(&cap, &regions, total, 1.0, 10.0, &v).unwrap();
        let e = crate::text::embed_tokens(prompt.unpadded(), &v);
        let p = AttentionLayerParams::seeded(dims(4, 4), 2, 4, 3, 6, v.embed_dim(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = gaussian(&mut rng, 16, 6);
        (v, prompt, e, p, z)
    }

    #[test]
    fn unit_control_matches_baseline_bitwise() {
        let v = Vocabulary::toy();
        let cap = tokenize("a photo of a dog", &v).unwrap();
        let prompt = concat_prompts(&cap, &[], cap.len(), 1.0, 10.0, &v).unwrap();
        let e = embed(&cap, &v);
        let p = AttentionLayerParams::seeded(dims(4, 4), 2, 4, 3, 6, v.embed_dim(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(&mut rng, 16, 6);
        let mask = assemble_concat_mask(&[], &prompt, p.dims).unwrap();
        let (a, ra) = cross_attention_baseline(&z, &e, &p).unwrap();
        let (b, rb) = cac_cross_attention(&z, &prompt, &e, &mask, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn zero_region_mask_annihilates_region_tokens() {
        let (_, prompt, e, p, z) = scene_fixture();
        let zero = build_mask_pyramid(&Grid::zeros(4, 4), &[p.dims], ResizeMode::Nearest).unwrap();
        let ones = build_mask_pyramid(&Grid::ones(4, 4), &[p.dims], ResizeMode::Nearest).unwrap();
        let mask = assemble_concat_mask(&[zero, ones], &prompt, p.dims).unwrap();
        let (out, rec) = cac_cross_attention(&z, &prompt, &e, &mask, &p).unwrap();
        let seg = prompt.segments()[1];
        for h in 0..rec.heads {
            for j in 0..rec.pixels {
                for k in seg.content() {
                    assert_eq!(rec.get(h, j, k), 0.0);
                }
            }
        }
        // overwriting the masked tokens' value rows leaves the output unchanged
        let pr = project(&z, &e, &p).unwrap();
        let mut v2 = pr.v.clone();
        for k in seg.content() {
            for c in 0..v2.cols() {
                v2.set(k, c, 1e6);
            }
        }
        let maps: Vec<Matrix> = (0..rec.heads).map(|h| rec.head(h)).collect();
        let out2 = combine(&maps, &v2, &p).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn substring_examples() {
        let v = Vocabulary::toy();
        let cap = tokenize("a photo of a dining table", &v).unwrap();
        let e = embed(&cap, &v);
        let p = AttentionLayerParams::seeded(dims(2, 2), 2, 4, 3, 6, v.embed_dim(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian(&mut rng, 4, 6);
        let (base, base_rec) = cross_attention_baseline(&z, &e, &p).unwrap();

        let (out, _) = substring_cac_attention(&z, &e, &[], &p).unwrap();
        assert_eq!(out, base);

        let ones = build_mask_pyramid(&Grid::ones(2, 2), &[p.dims], ResizeMode::Nearest).unwrap();
        let m = assemble_substring_mask(&ones, (5, 2), cap.len(), p.dims.id).unwrap();
        let (out, _) = substring_cac_attention(&z, &e, &[m], &p).unwrap();
        assert_eq!(out, base);

        let zero = build_mask_pyramid(&Grid::zeros(2, 2), &[p.dims], ResizeMode::Nearest).unwrap();
        let m = assemble_substring_mask(&zero, (5, 2), cap.len(), p.dims.id).unwrap();
        let (_, rec) = substring_cac_attention(&z, &e, std::slice::from_ref(&m), &p).unwrap();
        for h in 0..2 {
            for j in 0..4 {
                for k in 0..cap.len() {
                    let expect = if (5..7).contains(&k) {
                        0.0
                    } else {
                        base_rec.get(h, j, k)
                    };
                    assert_eq!(rec.get(h, j, k), expect);
                }
            }
        }

        let m2 = assemble_substring_mask(&zero, (6, 1), cap.len(), p.dims.id).unwrap();
        assert!(substring_cac_attention(&z, &e, &[m, m2], &p).is_err());

        // literal sum double counts span columns
        let m = assemble_substring_mask(&ones, (2, 1), cap.len(), p.dims.id).unwrap();
        let (_, rec) =
            substring_cac_attention_with(&z, &e, &[m], &p, SubstringCombine::LiteralSum).unwrap();
        assert_eq!(rec.get(0, 0, 2), 2.0 * base_rec.get(0, 0, 2));
    }

    #[test]
    fn average_outputs_examples() {
        let (v, _, _, p, z) = scene_fixture();
        let cap = embed(&tokenize("a photo of a dog", &v).unwrap(), &v);
        let reg = embed(&tokenize("boat", &v).unwrap(), &v);
        let (base, _) = cross_attention_baseline(&z, &cap, &p).unwrap();
        let (out, _) = compose_average_outputs(&z, &cap, &[], &p).unwrap();
        assert_eq!(out, base);
        let (out, _) = compose_average_outputs(&z, &cap, std::slice::from_ref(&cap), &p).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-15);
        let (out, rec) = compose_average_outputs(&z, &cap, std::slice::from_ref(&reg), &p).unwrap();
        let (r, _) = cross_attention_baseline(&z, &reg, &p).unwrap();
        let expect = base.add(&r).unwrap().scale(0.5);
        assert!(out.max_abs_diff(&expect) < 1e-12);
        assert_eq!(rec.tokens, cap.rows() + reg.rows());
    }

    #[test]
    fn self_attention_single_pixel_and_equivariance() {
        let p = AttentionLayerParams::seeded(dims(1, 1), 2, 3, 3, 4, 4, 8);
        let z = Matrix::from_rows(&[&[0.5, -1.0, 2.0, 0.1]]);
        let out = self_attention(&z, &p).unwrap();
        let expect = matmul(&matmul(&z, &p.w_v).unwrap(), &p.w_o).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-14);

        let p = AttentionLayerParams::seeded(dims(3, 1), 2, 3, 3, 4, 4, 8);
        let z = Matrix::from_rows(&[
            &[0.5, -1.0, 2.0, 0.1],
            &[1.5, 0.0, -0.3, 0.7],
            &[-0.2, 0.9, 0.4, -1.1],
        ]);
        let perm = [2, 0, 1];
        let zp = Matrix::vconcat(&perm.map(|i| z.row_block(i, 1))).unwrap();
        let out = self_attention(&z, &p).unwrap();
        let outp = self_attention(&zp, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((outp.get(dst, c) - out.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let (_, prompt, e, p, z) = scene_fixture();
        let bad_z = Matrix::zeros(15, 6);
        assert!(cross_attention_baseline(&bad_z, &e, &p).is_err());
        assert!(cross_attention_baseline(&z, &Matrix::zeros(3, 5), &p).is_err());
        let mask = ConcatMask {
            layer: LayerId(0),
            matrix: Matrix::filled(16, 3, 1.0),
            span: None,
        };
        assert!(cac_cross_attention(&z, &prompt, &e, &mask, &p).is_err());
        assert!(self_attention(&z, &p).is_err());
    }
}
