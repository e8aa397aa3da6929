//! The dual-stream model: a frozen-feature image side with a learnable
//! projection, a document transformer with a CLS token, a global dot-product
//! compatibility head, and a cross-modal attention head where image patches
//! query document words.
//!
//! Forward passes are expressed on a [`Tape`], so the same code serves
//! training (gradients) and inference (values only).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::ImageFeatureRecord;
use crate::tensor::{Reduce, Tape, Tensor, Var};

/// Global pooling over the patch axis of the attention-weighted embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

impl PoolKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(PoolKind::Mean),
            "max" => Some(PoolKind::Max),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
        }
    }
}

/// Architecture hyperparameters, echoed into checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input feature width r0 (word vectors and frozen image features).
    pub input_dim: usize,
    /// Joint embedding width r.
    pub embed_dim: usize,
    /// Heads per document transformer block.
    pub heads: usize,
    /// Document transformer depth.
    pub blocks: usize,
    /// Maximum document length in words.
    pub max_words: usize,
    /// Learned positional embeddings for document words (off by default;
    /// the attention analyses are order-agnostic).
    pub positional: bool,
    pub pool: PoolKind,
}

#[derive(Debug, Clone)]
pub struct Affine {
    /// in×out.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One-hidden-layer MLP with GELU, used for the token projection and the
/// transformer feed-forward.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Per-head self-attention projections, each r×head_dim; the output map is
/// head_dim×r so head contributions sum back into width r.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub heads: Vec<AttentionHead>,
    pub attn_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff: Mlp,
}

/// All learnable parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Image-side projection r0→r, shared by the global and patch features.
    pub image_projection: Affine,
    /// Token projection MLP r0→2r→r.
    pub token_projection: Mlp,
    pub doc_blocks: Vec<EncoderBlock>,
    /// Learned CLS token appended to the projected word sequence.
    pub cls_token: Tensor,
    /// (max_words+1)×r; the last row belongs to the CLS position.
    pub pos_embedding: Option<Tensor>,
    /// Cross-modal maps, r×r, no bias.
    pub cross_w_q: Tensor,
    pub cross_w_k: Tensor,
    pub cross_w_v: Tensor,
    /// Local scoring head, r→1.
    pub local_head: Affine,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

fn affine(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Affine {
    Affine {
        weight: uniform(rng, vec![input, output], input),
        bias: Tensor::zeros(vec![output]),
    }
}

fn mlp(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Mlp {
    Mlp {
        w1: uniform(rng, vec![input, hidden], input),
        b1: Tensor::zeros(vec![hidden]),
        w2: uniform(rng, vec![hidden, output], hidden),
        b2: Tensor::zeros(vec![output]),
    }
}

impl ModelParams {
    /// Deterministic fan-in uniform initialization from a seed.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
        assert!(
            config.embed_dim % config.heads == 0,
            "embed_dim {} not divisible by {} heads",
            config.embed_dim,
            config.heads
        );
        let (r0, r) = (config.input_dim, config.embed_dim);
        let head_dim = r / config.heads;
        let image_projection = affine(rng, r0, r);
        let token_projection = mlp(rng, r0, 2 * r, r);
        let mut doc_blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                heads.push(AttentionHead {
                    w_q: uniform(rng, vec![r, head_dim], r),
                    b_q: Tensor::zeros(vec![head_dim]),
                    w_k: uniform(rng, vec![r, head_dim], r),
                    b_k: Tensor::zeros(vec![head_dim]),
                    w_v: uniform(rng, vec![r, head_dim], r),
                    b_v: Tensor::zeros(vec![head_dim]),
                    w_o: uniform(rng, vec![head_dim, r], head_dim),
                });
            }
            doc_blocks.push(EncoderBlock {
                ln1_gain: Tensor::new(vec![r], vec![1.0; r]),
                ln1_bias: Tensor::zeros(vec![r]),
                heads,
                attn_bias: Tensor::zeros(vec![r]),
                ln2_gain: Tensor::new(vec![r], vec![1.0; r]),
                ln2_bias: Tensor::zeros(vec![r]),
                ff: mlp(rng, r, 4 * r, r),
            });
        }
        let cls_token = uniform(rng, vec![r], r);
        let pos_embedding = if config.positional {
            Some(uniform(rng, vec![config.max_words + 1, r], r))
        } else {
            None
        };
        let cross_w_q = uniform(rng, vec![r, r], r);
        let cross_w_k = uniform(rng, vec![r, r], r);
        let cross_w_v = uniform(rng, vec![r, r], r);
        let local_head = affine(rng, r, 1);
        ModelParams {
            config,
            image_projection,
            token_projection,
            doc_blocks,
            cls_token,
            pos_embedding,
            cross_w_q,
            cross_w_k,
            cross_w_v,
            local_head,
        }
    }

    /// Named views of every parameter tensor, in a fixed order shared with
    /// [`ModelParams::named_mut`] and [`ParamVars::ordered`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("image_projection.weight".into(), &self.image_projection.weight),
            ("image_projection.bias".into(), &self.image_projection.bias),
            ("token_projection.w1".into(), &self.token_projection.w1),
            ("token_projection.b1".into(), &self.token_projection.b1),
            ("token_projection.w2".into(), &self.token_projection.w2),
            ("token_projection.b2".into(), &self.token_projection.b2),
        ];
        for (b, block) in self.doc_blocks.iter().enumerate() {
            let p = format!("doc_block{}", b);
            out.push((format!("{}.ln1_gain", p), &block.ln1_gain));
            out.push((format!("{}.ln1_bias", p), &block.ln1_bias));
            for (h, head) in block.heads.iter().enumerate() {
                let hp = format!("{}.head{}", p, h);
                out.push((format!("{}.w_q", hp), &head.w_q));
                out.push((format!("{}.b_q", hp), &head.b_q));
                out.push((format!("{}.w_k", hp), &head.w_k));
                out.push((format!("{}.b_k", hp), &head.b_k));
                out.push((format!("{}.w_v", hp), &head.w_v));
                out.push((format!("{}.b_v", hp), &head.b_v));
                out.push((format!("{}.w_o", hp), &head.w_o));
            }
            out.push((format!("{}.attn_bias", p), &block.attn_bias));
            out.push((format!("{}.ln2_gain", p), &block.ln2_gain));
            out.push((format!("{}.ln2_bias", p), &block.ln2_bias));
            out.push((format!("{}.ff.w1", p), &block.ff.w1));
            out.push((format!("{}.ff.b1", p), &block.ff.b1));
            out.push((format!("{}.ff.w2", p), &block.ff.w2));
            out.push((format!("{}.ff.b2", p), &block.ff.b2));
        }
        out.push(("cls_token".into(), &self.cls_token));
        if let Some(pos) = &self.pos_embedding {
            out.push(("pos_embedding".into(), pos));
        }
        out.push(("cross.w_q".into(), &self.cross_w_q));
        out.push(("cross.w_k".into(), &self.cross_w_k));
        out.push(("cross.w_v".into(), &self.cross_w_v));
        out.push(("local_head.weight".into(), &self.local_head.weight));
        out.push(("local_head.bias".into(), &self.local_head.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            (
                "image_projection.weight".into(),
                &mut self.image_projection.weight,
            ),
            ("image_projection.bias".into(), &mut self.image_projection.bias),
            ("token_projection.w1".into(), &mut self.token_projection.w1),
            ("token_projection.b1".into(), &mut self.token_projection.b1),
            ("token_projection.w2".into(), &mut self.token_projection.w2),
            ("token_projection.b2".into(), &mut self.token_projection.b2),
        ];
        for (b, block) in self.doc_blocks.iter_mut().enumerate() {
            let p = format!("doc_block{}", b);
            out.push((format!("{}.ln1_gain", p), &mut block.ln1_gain));
            out.push((format!("{}.ln1_bias", p), &mut block.ln1_bias));
            for (h, head) in block.heads.iter_mut().enumerate() {
                let hp = format!("{}.head{}", p, h);
                out.push((format!("{}.w_q", hp), &mut head.w_q));
                out.push((format!("{}.b_q", hp), &mut head.b_q));
                out.push((format!("{}.w_k", hp), &mut head.w_k));
                out.push((format!("{}.b_k", hp), &mut head.b_k));
                out.push((format!("{}.w_v", hp), &mut head.w_v));
                out.push((format!("{}.b_v", hp), &mut head.b_v));
                out.push((format!("{}.w_o", hp), &mut head.w_o));
            }
            out.push((format!("{}.attn_bias", p), &mut block.attn_bias));
            out.push((format!("{}.ln2_gain", p), &mut block.ln2_gain));
            out.push((format!("{}.ln2_bias", p), &mut block.ln2_bias));
            out.push((format!("{}.ff.w1", p), &mut block.ff.w1));
            out.push((format!("{}.ff.b1", p), &mut block.ff.b1));
            out.push((format!("{}.ff.w2", p), &mut block.ff.w2));
            out.push((format!("{}.ff.b2", p), &mut block.ff.b2));
        }
        out.push(("cls_token".into(), &mut self.cls_token));
        if let Some(pos) = &mut self.pos_embedding {
            out.push(("pos_embedding".into(), pos));
        }
        out.push(("cross.w_q".into(), &mut self.cross_w_q));
        out.push(("cross.w_k".into(), &mut self.cross_w_k));
        out.push(("cross.w_v".into(), &mut self.cross_w_v));
        out.push(("local_head.weight".into(), &mut self.local_head.weight));
        out.push(("local_head.bias".into(), &mut self.local_head.bias));
        out
    }

    /// SHA-256 over every parameter's bytes, for read-only and ablation
    /// isolation checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.named() {
            hasher.update(name.as_bytes());
            for v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Checksum over the cross-modal attention parameters only.
    pub fn attention_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [
            &self.cross_w_q,
            &self.cross_w_k,
            &self.cross_w_v,
            &self.local_head.weight,
            &self.local_head.bias,
        ] {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{:02x}", b);
        s
    })
}

// ── tape-side parameter handles ─────────────────────────────────────────

pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct AttentionHeadVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
}

pub struct EncoderBlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub heads: Vec<AttentionHeadVars>,
    pub attn_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff: MlpVars,
}

/// The model's parameters inserted into one tape.
pub struct ParamVars {
    pub config: ModelConfig,
    pub image_projection: AffineVars,
    pub token_projection: MlpVars,
    pub doc_blocks: Vec<EncoderBlockVars>,
    pub cls_token: Var,
    pub pos_embedding: Option<Var>,
    pub cross_w_q: Var,
    pub cross_w_k: Var,
    pub cross_w_v: Var,
    pub local_head: AffineVars,
}

impl ModelParams {
    /// Insert every parameter as a tape leaf. With `trainable`, gradients
    /// flow to all of them on backward.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut l = |t: &Tensor| tape.leaf(t, trainable);
        let image_projection = AffineVars {
            weight: l(&self.image_projection.weight),
            bias: l(&self.image_projection.bias),
        };
        let token_projection = MlpVars {
            w1: l(&self.token_projection.w1),
            b1: l(&self.token_projection.b1),
            w2: l(&self.token_projection.w2),
            b2: l(&self.token_projection.b2),
        };
        let mut doc_blocks = Vec::with_capacity(self.doc_blocks.len());
        for block in &self.doc_blocks {
            let ln1_gain = l(&block.ln1_gain);
            let ln1_bias = l(&block.ln1_bias);
            let heads = block
                .heads
                .iter()
                .map(|h| AttentionHeadVars {
                    w_q: l(&h.w_q),
                    b_q: l(&h.b_q),
                    w_k: l(&h.w_k),
                    b_k: l(&h.b_k),
                    w_v: l(&h.w_v),
                    b_v: l(&h.b_v),
                    w_o: l(&h.w_o),
                })
                .collect();
            doc_blocks.push(EncoderBlockVars {
                ln1_gain,
                ln1_bias,
                heads,
                attn_bias: l(&block.attn_bias),
                ln2_gain: l(&block.ln2_gain),
                ln2_bias: l(&block.ln2_bias),
                ff: MlpVars {
                    w1: l(&block.ff.w1),
                    b1: l(&block.ff.b1),
                    w2: l(&block.ff.w2),
                    b2: l(&block.ff.b2),
                },
            });
        }
        let cls_token = l(&self.cls_token);
        let pos_embedding = self.pos_embedding.as_ref().map(&mut l);
        let cross_w_q = l(&self.cross_w_q);
        let cross_w_k = l(&self.cross_w_k);
        let cross_w_v = l(&self.cross_w_v);
        let local_head = AffineVars {
            weight: l(&self.local_head.weight),
            bias: l(&self.local_head.bias),
        };
        ParamVars {
            config: self.config.clone(),
            image_projection,
            token_projection,
            doc_blocks,
            cls_token,
            pos_embedding,
            cross_w_q,
            cross_w_k,
            cross_w_v,
            local_head,
        }
    }
}

impl ParamVars {
    /// Vars in the same order as [`ModelParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.image_projection.weight,
            self.image_projection.bias,
            self.token_projection.w1,
            self.token_projection.b1,
            self.token_projection.w2,
            self.token_projection.b2,
        ];
        for block in &self.doc_blocks {
            out.push(block.ln1_gain);
            out.push(block.ln1_bias);
            for h in &block.heads {
                out.extend([h.w_q, h.b_q, h.w_k, h.b_k, h.w_v, h.b_v, h.w_o]);
            }
            out.push(block.attn_bias);
            out.push(block.ln2_gain);
            out.push(block.ln2_bias);
            out.extend([block.ff.w1, block.ff.b1, block.ff.w2, block.ff.b2]);
        }
        out.push(self.cls_token);
        if let Some(p) = self.pos_embedding {
            out.push(p);
        }
        out.extend([self.cross_w_q, self.cross_w_k, self.cross_w_v]);
        out.push(self.local_head.weight);
        out.push(self.local_head.bias);
        out
    }
}

// ── forward passes ──────────────────────────────────────────────────────

fn apply_affine(tape: &mut Tape, a: &AffineVars, x: Var) -> Var {
    let y = tape.matmul(x, a.weight);
    tape.add_row(y, a.bias)
}

fn apply_mlp(tape: &mut Tape, m: &MlpVars, x: Var) -> Var {
    let h = tape.matmul(x, m.w1);
    let h = tape.add_row(h, m.b1);
    let h = tape.gelu(h);
    let y = tape.matmul(h, m.w2);
    tape.add_row(y, m.b2)
}

/// Image features after the learnable projection: `f_cls` is `[r]`,
/// `f_patches` is N×r. The same affine map projects both.
pub struct EncodedImageVars {
    pub f_cls: Var,
    pub f_patches: Var,
}

pub fn encode_image(
    tape: &mut Tape,
    pv: &ParamVars,
    cls_feature: Var,
    patch_features: Var,
) -> EncodedImageVars {
    let r = pv.config.embed_dim;
    let cls = apply_affine(tape, &pv.image_projection, cls_feature);
    let f_cls = tape.reshape(cls, vec![r]);
    let f_patches = apply_affine(tape, &pv.image_projection, patch_features);
    EncodedImageVars { f_cls, f_patches }
}

/// Document encodings: `g_cls` is `[r]` (the document embedding), `g_tokens`
/// is M×r, and `cls_attention` holds the raw per-head attention rows of the
/// CLS position in the final block (each sums to 1 over the M+1 positions).
pub struct EncodedDocumentVars {
    pub g_cls: Var,
    pub g_tokens: Var,
    pub cls_attention: Vec<Vec<f64>>,
}

/// Run the document transformer over an embedded word matrix (M×r0).
pub fn encode_document(tape: &mut Tape, pv: &ParamVars, doc_matrix: Var) -> EncodedDocumentVars {
    let m = tape.shape(doc_matrix)[0];
    assert!(m >= 1, "cannot encode an empty document");
    assert!(
        m <= pv.config.max_words,
        "document length {} exceeds max_words {}",
        m,
        pv.config.max_words
    );
    let r = pv.config.embed_dim;

    let tokens = apply_mlp(tape, &pv.token_projection, doc_matrix);
    let cls_row = tape.reshape(pv.cls_token, vec![1, r]);
    let mut seq = tape.concat_rows(tokens, cls_row);
    if let Some(pos) = pv.pos_embedding {
        let word_pos = tape.slice_rows(pos, 0, m);
        let cls_pos = tape.slice_rows(pos, pv.config.max_words, 1);
        let seq_pos = tape.concat_rows(word_pos, cls_pos);
        seq = tape.add(seq, seq_pos);
    }

    let mut final_attention: Vec<Var> = Vec::new();
    for block in &pv.doc_blocks {
        let (next, attention) = encoder_block(tape, block, seq);
        seq = next;
        final_attention = attention;
    }

    let g_tokens = tape.slice_rows(seq, 0, m);
    let cls_out = tape.slice_rows(seq, m, 1);
    let g_cls = tape.reshape(cls_out, vec![r]);

    let cls_attention = final_attention
        .iter()
        .map(|&a| {
            let s = m + 1;
            tape.value(a)[m * s..(m + 1) * s].to_vec()
        })
        .collect();

    EncodedDocumentVars {
        g_cls,
        g_tokens,
        cls_attention,
    }
}

/// Pre-norm block: x + MHA(LN(x)), then x + FF(LN(x)). Returns the per-head
/// attention matrices (S×S) for attribution capture.
fn encoder_block(tape: &mut Tape, block: &EncoderBlockVars, x: Var) -> (Var, Vec<Var>) {
    let normed = tape.layer_norm(x, block.ln1_gain, block.ln1_bias);
    let head_dim = tape.shape(block.heads[0].w_q)[1];
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut attn_sum: Option<Var> = None;
    let mut attentions = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let q = tape.matmul(normed, head.w_q);
        let q = tape.add_row(q, head.b_q);
        let k = tape.matmul(normed, head.w_k);
        let k = tape.add_row(k, head.b_k);
        let v = tape.matmul(normed, head.w_v);
        let v = tape.add_row(v, head.b_v);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let attention = tape.softmax(scores, 1);
        attentions.push(attention);
        let ctx = tape.matmul(attention, v);
        let proj = tape.matmul(ctx, head.w_o);
        attn_sum = Some(match attn_sum {
            None => proj,
            Some(acc) => tape.add(acc, proj),
        });
    }
    let attn_out = tape.add_row(attn_sum.expect("at least one head"), block.attn_bias);
    let x = tape.add(x, attn_out);

    let normed2 = tape.layer_norm(x, block.ln2_gain, block.ln2_bias);
    let ff = apply_mlp(tape, &block.ff, normed2);
    (tape.add(x, ff), attentions)
}

/// Global compatibility: dot product of the image and document CLS
/// embeddings. Bilinear in both arguments.
pub fn global_score(tape: &mut Tape, img: &EncodedImageVars, doc: &EncodedDocumentVars) -> Var {
    tape.dot(img.f_cls, doc.g_cls)
}

/// Cross-entropy of the global scores against every candidate document.
pub fn global_loss(
    tape: &mut Tape,
    img: &EncodedImageVars,
    docs: &[EncodedDocumentVars],
    target: usize,
) -> Var {
    let scores: Vec<Var> = docs.iter().map(|d| global_score(tape, img, d)).collect();
    let row = tape.stack_scalars(&scores);
    tape.cross_entropy(row, target)
}

/// Per-document key/value projections for the cross-modal head, computed
/// once per document and reused across the images of a step.
pub struct DocAttentionVars {
    pub keys: Var,
    pub values: Var,
}

pub fn prepare_doc_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    doc: &EncodedDocumentVars,
) -> DocAttentionVars {
    DocAttentionVars {
        keys: tape.matmul(doc.g_tokens, pv.cross_w_k),
        values: tape.matmul(doc.g_tokens, pv.cross_w_v),
    }
}

/// Patch queries for the cross-modal head, computed once per image.
pub fn image_queries(tape: &mut Tape, pv: &ParamVars, img: &EncodedImageVars) -> Var {
    tape.matmul(img.f_patches, pv.cross_w_q)
}

/// Cross-modal attention output: the N×M patch-to-word attention map and the
/// pooled attention-weighted embedding (no skip connection).
pub struct AttentionVars {
    pub map: Var,
    pub pooled: Var,
}

pub fn i2d_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    queries: Var,
    doc_attn: &DocAttentionVars,
) -> AttentionVars {
    let r = pv.config.embed_dim;
    let kt = tape.transpose(doc_attn.keys);
    let scores = tape.matmul(queries, kt);
    let scores = tape.scale(scores, 1.0 / (r as f64).sqrt());
    let map = tape.softmax(scores, 1);
    let weighted = tape.matmul(map, doc_attn.values);
    let pool = match pv.config.pool {
        PoolKind::Mean => Reduce::Mean,
        PoolKind::Max => Reduce::Max,
    };
    let pooled = tape.reduce_axis(pool, weighted, 0);
    AttentionVars { map, pooled }
}

/// Convenience wrapper matching the one-pair contract: project the document
/// keys/values and the image queries, then attend.
pub fn i2d_attention_pair(
    tape: &mut Tape,
    pv: &ParamVars,
    img: &EncodedImageVars,
    doc: &EncodedDocumentVars,
) -> AttentionVars {
    let doc_attn = prepare_doc_attention(tape, pv, doc);
    let queries = image_queries(tape, pv, img);
    i2d_attention(tape, pv, queries, &doc_attn)
}

/// Scalar affine head over the pooled cross-modal embedding.
pub fn local_score(tape: &mut Tape, pv: &ParamVars, pooled: Var) -> Var {
    let r = pv.config.embed_dim;
    let row = tape.reshape(pooled, vec![1, r]);
    let s = tape.matmul(row, pv.local_head.weight);
    let s = tape.reshape(s, vec![1]);
    tape.add(s, pv.local_head.bias)
}

/// Cross-entropy of the local scores against every candidate document.
pub fn local_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    img: &EncodedImageVars,
    doc_attns: &[DocAttentionVars],
    target: usize,
) -> Var {
    let queries = image_queries(tape, pv, img);
    let scores: Vec<Var> = doc_attns
        .iter()
        .map(|da| {
            let attn = i2d_attention(tape, pv, queries, da);
            local_score(tape, pv, attn.pooled)
        })
        .collect();
    let row = tape.stack_scalars(&scores);
    tape.cross_entropy(row, target)
}

/// Joint objective: global loss plus `lambda_local` times the local loss.
/// `lambda_local = 0` skips the attention path entirely.
pub fn total_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    img: &EncodedImageVars,
    docs: &[EncodedDocumentVars],
    doc_attns: &[DocAttentionVars],
    target: usize,
    lambda_local: f64,
) -> Var {
    let global = global_loss(tape, img, docs, target);
    if lambda_local == 0.0 {
        return global;
    }
    let local = local_loss(tape, pv, img, doc_attns, target);
    let scaled = tape.scale(local, lambda_local);
    tape.add(global, scaled)
}

// ── value-level wrappers (inference) ────────────────────────────────────

/// Document encodings as plain values.
#[derive(Debug, Clone)]
pub struct EncodedDocument {
    pub class_id: String,
    pub tokens: Vec<String>,
    pub g_cls: Vec<f64>,
    pub g_tokens: Tensor,
    pub cls_attention: Vec<Vec<f64>>,
}

/// Image encodings as plain values.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub f_cls: Vec<f64>,
    pub f_patches: Tensor,
}

/// Cross-modal attention outputs as plain values.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// N×M, rows sum to 1.
    pub map: Tensor,
    pub pooled: Vec<f64>,
    pub local_score: f64,
}

pub fn encode_document_values(
    params: &ModelParams,
    class_id: &str,
    tokens: &[String],
    doc_matrix: &Tensor,
) -> EncodedDocument {
    let mut tape = Tape::new();
    let pv = params.leaves(&mut tape, false);
    let dv = tape.leaf(doc_matrix, false);
    let enc = encode_document(&mut tape, &pv, dv);
    EncodedDocument {
        class_id: class_id.to_string(),
        tokens: tokens.to_vec(),
        g_cls: tape.value(enc.g_cls).to_vec(),
        g_tokens: tape.to_tensor(enc.g_tokens),
        cls_attention: enc.cls_attention,
    }
}

pub fn encode_image_values(params: &ModelParams, rec: &ImageFeatureRecord) -> EncodedImage {
    assert_eq!(
        rec.cls_feature.len(),
        params.config.input_dim,
        "image feature dim {} does not match model input dim {}",
        rec.cls_feature.len(),
        params.config.input_dim
    );
    let mut tape = Tape::new();
    let pv = params.leaves(&mut tape, false);
    let cls = tape.leaf(
        &Tensor::matrix(1, rec.cls_feature.len(), rec.cls_feature.clone()),
        false,
    );
    let patches = tape.leaf(
        &Tensor::matrix(
            rec.n_patches,
            rec.cls_feature.len(),
            rec.patch_features.clone(),
        ),
        false,
    );
    let enc = encode_image(&mut tape, &pv, cls, patches);
    EncodedImage {
        f_cls: tape.value(enc.f_cls).to_vec(),
        f_patches: tape.to_tensor(enc.f_patches),
    }
}

/// Cross-modal attention between an encoded image and document.
pub fn attention_values(
    params: &ModelParams,
    img: &EncodedImage,
    doc: &EncodedDocument,
) -> AttentionOutput {
    let mut tape = Tape::new();
    let pv = params.leaves(&mut tape, false);
    let f_patches = tape.leaf(&img.f_patches, false);
    let g_tokens = tape.leaf(&doc.g_tokens, false);
    let doc_attn = DocAttentionVars {
        keys: tape.matmul(g_tokens, pv.cross_w_k),
        values: tape.matmul(g_tokens, pv.cross_w_v),
    };
    let queries = tape.matmul(f_patches, pv.cross_w_q);
    let attn = i2d_attention(&mut tape, &pv, queries, &doc_attn);
    let score = local_score(&mut tape, &pv, attn.pooled);
    AttentionOutput {
        map: tape.to_tensor(attn.map),
        pooled: tape.value(attn.pooled).to_vec(),
        local_score: tape.scalar_value(score),
    }
}

/// Encode every document in a map, keyed by class id.
pub fn encode_all_documents(
    params: &ModelParams,
    documents: &BTreeMap<String, crate::corpus::ClassDocument>,
) -> BTreeMap<String, EncodedDocument> {
    documents
        .iter()
        .map(|(id, doc)| {
            (
                id.clone(),
                encode_document_values(params, id, &doc.tokens, &doc.matrix),
            )
        })
        .collect()
}
