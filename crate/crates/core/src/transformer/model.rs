use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;

use super::{ModelConfig, ModelError, PeTable};
use crate::autodiff::{Float, Graph, Mask, ParamStore, SeededRng, Tensor, Var};
use crate::data::PAD;

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm_attn: NormParams,
    pub attn: AttnParams,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm_self: NormParams,
    pub self_attn: AttnParams,
    pub norm_cross: NormParams,
    pub cross_attn: AttnParams,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
}

/// Indices of every parameter group inside the store, in declaration order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: NormParams,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: NormParams,
    pub out: LinearParams,
    /// Length predictor `V`, `[d, d]`.
    pub len_v: usize,
    /// Length predictor `W`, `[length_classes, d]`.
    pub len_w: usize,
}

fn push_linear<F: Float>(
    s: &mut ParamStore<F>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> LinearParams {
    LinearParams {
        w: s.push_xavier(format!("{name}.w"), fan_in, fan_out, rng),
        b: s.push_const(format!("{name}.b"), fan_out, 0.0),
    }
}

fn push_norm<F: Float>(s: &mut ParamStore<F>, name: &str, d: usize) -> NormParams {
    NormParams {
        gamma: s.push_const(format!("{name}.gamma"), d, 1.0),
        beta: s.push_const(format!("{name}.beta"), d, 0.0),
    }
}

fn push_attn<F: Float>(s: &mut ParamStore<F>, name: &str, d: usize, rng: &mut SeededRng) -> AttnParams {
    AttnParams {
        q: push_linear(s, &format!("{name}.q"), d, d, rng),
        k: push_linear(s, &format!("{name}.k"), d, d, rng),
        v: push_linear(s, &format!("{name}.v"), d, d, rng),
        o: push_linear(s, &format!("{name}.o"), d, d, rng),
    }
}

fn push_ffn<F: Float>(s: &mut ParamStore<F>, name: &str, d: usize, d_ffn: usize, rng: &mut SeededRng) -> FfnParams {
    FfnParams {
        up: push_linear(s, &format!("{name}.up"), d, d_ffn, rng),
        down: push_linear(s, &format!("{name}.down"), d_ffn, d, rng),
    }
}

impl Layout {
    /// Declares all parameters of `cfg` into `store`.
    pub fn declare<F: Float>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut SeededRng) -> Self {
        let d = cfg.d_model;
        let emb_std = (d as f64).powf(-0.5);
        let src_embed = store.push_normal("src_embed", cfg.src_vocab, d, emb_std, rng);
        let tgt_embed = store.push_normal("tgt_embed", cfg.tgt_vocab, d, emb_std, rng);
        let encoder = (0..cfg.n_enc_layers)
            .map(|l| {
                let n = format!("enc{l}");
                EncoderLayer {
                    norm_attn: push_norm(store, &format!("{n}.norm_attn"), d),
                    attn: push_attn(store, &format!("{n}.attn"), d, rng),
                    norm_ffn: push_norm(store, &format!("{n}.norm_ffn"), d),
                    ffn: push_ffn(store, &format!("{n}.ffn"), d, cfg.d_ffn, rng),
                }
            })
            .collect();
        let enc_norm = push_norm(store, "enc_norm", d);
        let decoder = (0..cfg.n_dec_layers)
            .map(|l| {
                let n = format!("dec{l}");
                DecoderLayer {
                    norm_self: push_norm(store, &format!("{n}.norm_self"), d),
                    self_attn: push_attn(store, &format!("{n}.self_attn"), d, rng),
                    norm_cross: push_norm(store, &format!("{n}.norm_cross"), d),
                    cross_attn: push_attn(store, &format!("{n}.cross_attn"), d, rng),
                    norm_ffn: push_norm(store, &format!("{n}.norm_ffn"), d),
                    ffn: push_ffn(store, &format!("{n}.ffn"), d, cfg.d_ffn, rng),
                }
            })
            .collect();
        let dec_norm = push_norm(store, "dec_norm", d);
        // Initial logits must stay close to uniform.
        let out = LinearParams {
            w: store.push_normal("out.w", d, cfg.tgt_vocab, 0.02, rng),
            b: store.push_const("out.b", cfg.tgt_vocab, 0.0),
        };
        let len_v = store.push_xavier("len.v", d, d, rng);
        let len_w = store.push_xavier("len.w", cfg.length_classes, d, rng);
        Self {
            src_embed,
            tgt_embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out,
            len_v,
            len_w,
        }
    }
}

/// A right-padded batch of id sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl PaddedIds {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self, ModelError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(ModelError::EmptySource);
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            width,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn single(seq: &[usize]) -> Result<Self, ModelError> {
        Self::new(&[seq.to_vec()])
    }
}

/// Per-pass state: the tape, the bound parameter handles and the dropout
/// source. Dropout is active only when a generator is supplied and the rate
/// is positive.
pub struct Forward<'a, F: Float> {
    pub g: &'a mut Graph<F>,
    pub p: &'a [Var],
    dropout: f64,
    rng: Option<&'a mut SeededRng>,
}

impl<'a, F: Float> Forward<'a, F> {
    pub fn eval(g: &'a mut Graph<F>, p: &'a [Var]) -> Self {
        Self {
            g,
            p,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(g: &'a mut Graph<F>, p: &'a [Var], dropout: f64, rng: &'a mut SeededRng) -> Self {
        Self {
            g,
            p,
            dropout,
            rng: Some(rng),
        }
    }

    /// Inverted dropout.
    pub fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let scale = F::from_f64_lossy(1.0 / keep);
        let data = (0..n)
            .map(|_| if rng.uniform() < keep { scale } else { F::zero() })
            .collect();
        let m = self.g.input(Tensor::new(shape, data)?);
        Ok(self.g.mul(x, m)?)
    }

    fn linear(&mut self, lp: LinearParams, x: Var) -> Result<Var, ModelError> {
        let h = self.g.matmul(x, self.p[lp.w])?;
        Ok(self.g.add(h, self.p[lp.b])?)
    }

    fn norm(&mut self, np: NormParams, x: Var) -> Result<Var, ModelError> {
        Ok(self.g.layer_norm(x, self.p[np.gamma], self.p[np.beta])?)
    }

    fn ffn(&mut self, fp: FfnParams, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(fp.up, x)?;
        let h = self.g.relu(h)?;
        let h = self.dropout(h)?;
        self.linear(fp.down, h)
    }

    /// Projected multi-head attention. `q_in` is `[B, Tq, d]`, `kv_in` is
    /// `[B, Tk, d]` and `mask` is `[B, Tq, Tk]`. Returns the projected output
    /// and the pre-dropout weights `[B·H, Tq, Tk]`.
    pub fn attention(
        &mut self,
        ap: AttnParams,
        heads: usize,
        q_in: Var,
        kv_in: Var,
        mask: &Mask,
    ) -> Result<(Var, Var), ModelError> {
        let q = self.linear(ap.q, q_in)?;
        let k = self.linear(ap.k, kv_in)?;
        let v = self.linear(ap.v, kv_in)?;
        let (ctx, weights) = dot_product_attention(self, q, k, v, mask, heads)?;
        let out = self.linear(ap.o, ctx)?;
        Ok((out, weights))
    }
}

/// Scaled dot-product attention on already projected `[B, T, d]` inputs,
/// split into `heads` heads of width `d / heads`.
pub fn dot_product_attention<F: Float>(
    fx: &mut Forward<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    heads: usize,
) -> Result<(Var, Var), ModelError> {
    if fx.g.shape(k)[1] == 0 {
        return Err(ModelError::EmptyContext);
    }
    let d = fx.g.shape(q)[2];
    let dk = d / heads;
    let qh = fx.g.split_heads(q, heads)?;
    let kh = fx.g.split_heads(k, heads)?;
    let vh = fx.g.split_heads(v, heads)?;
    let scores = fx.g.matmul_t(qh, kh)?;
    let scores = fx.g.scale(scores, F::from_f64_lossy(1.0 / (dk as f64).sqrt()))?;
    let weights = fx.g.softmax(scores, Some(mask))?;
    let dropped = fx.dropout(weights)?;
    let ctx = fx.g.matmul(dropped, vh)?;
    let ctx = fx.g.merge_heads(ctx, heads)?;
    Ok((ctx, weights))
}

/// Output of a decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B, I, tgt_vocab]`.
    pub logits: Var,
    /// Final-layer cross-attention weights, `[B·H, I, M]`.
    pub cross_weights: Var,
}

/// Model architecture: configuration, parameter layout and positional
/// table. Weights live separately so the same forward code runs at any
/// precision.
#[derive(Debug)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub pe: PeTable,
    truncations: AtomicUsize,
}

impl Clone for Arch {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            pe: self.pe.clone(),
            truncations: AtomicUsize::new(self.truncations()),
        }
    }
}

impl Arch {
    /// Number of input sequences shortened to `max_positions` so far.
    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Cuts sequences longer than `max_positions`, counting each cut.
    pub fn truncate(&self, seq: &[usize]) -> Vec<usize> {
        let max = self.cfg.max_positions;
        if seq.len() > max {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            warn!("sequence of length {} truncated to {max}", seq.len());
            seq[..max].to_vec()
        } else {
            seq.to_vec()
        }
    }

    fn pe_input<F: Float>(&self, g: &mut Graph<F>, start: usize, len: usize) -> Result<Var, ModelError> {
        let rows = self.pe.rows_flat(start, len)?;
        Ok(g.input(Tensor::from_f64(&[len, self.cfg.d_model], rows)?))
    }

    /// PE rows `start..start + len` as a constant `[len, d]` node.
    pub fn pe_rows<F: Float>(&self, g: &mut Graph<F>, start: usize, len: usize) -> Result<Var, ModelError> {
        self.pe_input(g, start, len)
    }

    fn embed<F: Float>(&self, fx: &mut Forward<'_, F>, table: usize, ids: &PaddedIds) -> Result<Var, ModelError> {
        let d = self.cfg.d_model;
        if ids.width > self.cfg.max_positions {
            return Err(ModelError::PositionOutOfRange {
                pos: ids.width - 1,
                max: self.cfg.max_positions,
            });
        }
        let e = fx.g.embedding(fx.p[table], &ids.ids)?;
        let e = fx.g.reshape(e, &[ids.batch, ids.width, d])?;
        let e = fx.g.scale(e, F::from_f64_lossy((d as f64).sqrt()))?;
        let pe = self.pe_input(fx.g, 0, ids.width)?;
        let e = fx.g.add(e, pe)?;
        fx.dropout(e)
    }

    /// Encoder states `[B, J, d]` after the final layer norm. With a causal
    /// encoder, state `j` reads source positions `0..=j` only.
    pub fn encode<F: Float>(&self, fx: &mut Forward<'_, F>, src: &PaddedIds) -> Result<Var, ModelError> {
        let causal = self.cfg.unidirectional_encoder;
        let lens = &src.lengths;
        let mask = Mask::from_fn(src.batch, src.width, src.width, |b, i, j| {
            j < lens[b] && (!causal || j <= i)
        });
        let mut x = self.embed(fx, self.layout.src_embed, src)?;
        for layer in &self.layout.encoder {
            let h = fx.norm(layer.norm_attn, x)?;
            let (a, _) = fx.attention(layer.attn, self.cfg.n_heads, h, h, &mask)?;
            let a = fx.dropout(a)?;
            x = fx.g.add(x, a)?;
            let h = fx.norm(layer.norm_ffn, x)?;
            let f = fx.ffn(layer.ffn, h)?;
            let f = fx.dropout(f)?;
            x = fx.g.add(x, f)?;
        }
        fx.norm(self.layout.enc_norm, x)
    }

    /// Decoder pass over the bos-prefixed inputs `tgt_in` against a caller
    /// supplied `memory` (`[B, M, d]`) and per-query validity `cross_mask`
    /// (`[B, I, M]`).
    pub fn decode<F: Float>(
        &self,
        fx: &mut Forward<'_, F>,
        tgt_in: &PaddedIds,
        memory: Var,
        cross_mask: &Mask,
    ) -> Result<StepOutput, ModelError> {
        let m = fx.g.shape(memory)[1];
        if m == 0 || cross_mask.cols() == 0 {
            return Err(ModelError::EmptyContext);
        }
        let n = tgt_in.width;
        let self_mask = Mask::from_fn(tgt_in.batch, n, n, |_, i, j| j <= i);
        let heads = self.cfg.n_heads;
        let mut x = self.embed(fx, self.layout.tgt_embed, tgt_in)?;
        let mut cross_weights = None;
        for layer in &self.layout.decoder {
            let h = fx.norm(layer.norm_self, x)?;
            let (a, _) = fx.attention(layer.self_attn, heads, h, h, &self_mask)?;
            let a = fx.dropout(a)?;
            x = fx.g.add(x, a)?;
            let h = fx.norm(layer.norm_cross, x)?;
            let (c, w) = fx.attention(layer.cross_attn, heads, h, memory, cross_mask)?;
            cross_weights = Some(w);
            let c = fx.dropout(c)?;
            x = fx.g.add(x, c)?;
            let h = fx.norm(layer.norm_ffn, x)?;
            let f = fx.ffn(layer.ffn, h)?;
            let f = fx.dropout(f)?;
            x = fx.g.add(x, f)?;
        }
        let x = fx.norm(self.layout.dec_norm, x)?;
        let logits = fx.linear(self.layout.out, x)?;
        Ok(StepOutput {
            logits,
            cross_weights: cross_weights.expect("at least one decoder layer"),
        })
    }

    /// Length logits `[B, I, N]` for prefix means `avg · h`, where `avg`
    /// (`[B, I, J]`) holds `1/g` on the first `g` columns of each row.
    pub fn length_logits<F: Float>(&self, fx: &mut Forward<'_, F>, h: Var, avg: Tensor<F>) -> Result<Var, ModelError> {
        let avg = fx.g.input(avg);
        let mean = fx.g.matmul(avg, h)?;
        let z = fx.g.matmul_t(mean, fx.p[self.layout.len_v])?;
        let z = fx.g.tanh(z)?;
        Ok(fx.g.matmul_t(z, fx.p[self.layout.len_w])?)
    }
}

/// A model with its weights at precision `F`.
#[derive(Clone, Debug)]
pub struct Seq2Seq<F: Float> {
    pub arch: Arch,
    pub params: ParamStore<F>,
}

impl<F: Float> Seq2Seq<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(seed, 0x1217);
        let mut params = ParamStore::new();
        let layout = Layout::declare(&cfg, &mut params, &mut rng);
        let pe = PeTable::new(cfg.max_positions, cfg.d_model)?;
        Ok(Self {
            arch: Arch {
                cfg,
                layout,
                pe,
                truncations: AtomicUsize::new(0),
            },
            params,
        })
    }

    pub fn from_parts(arch: Arch, params: ParamStore<F>) -> Self {
        Self { arch, params }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn cast<G: Float>(&self) -> Seq2Seq<G> {
        Seq2Seq {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

/// Averages `[B·H, I, M]` weights over heads into `[B][I][M]` rows.
pub fn head_average<F: Float>(weights: &Tensor<F>, heads: usize) -> Vec<Vec<Vec<f64>>> {
    let s = weights.shape();
    let (bh, rows, cols) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let mut out = vec![vec![vec![0.0; cols]; rows]; b];
    for (bi, batch) in out.iter_mut().enumerate() {
        for h in 0..heads {
            for (r, row) in batch.iter_mut().enumerate() {
                let src = weights.row((bi * heads + h) * rows + r);
                for (o, x) in row.iter_mut().zip(src) {
                    *o += x.as_f64() / heads as f64;
                }
            }
        }
    }
    out
}

/// Cross-attention record of one target step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep {
    /// Number of key columns visible to this step.
    pub key_len: usize,
    /// Per-head weights over the visible columns.
    pub per_head: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub steps: Vec<AttentionStep>,
}

impl AttentionTrace {
    /// Builds a trace for batch element `b` from `[B·H, I, M]` weights,
    /// keeping for step `i` the columns `visible(i)` (in order).
    pub fn from_weights<F: Float>(
        weights: &Tensor<F>,
        heads: usize,
        b: usize,
        steps: usize,
        visible: impl Fn(usize) -> Vec<usize>,
    ) -> Self {
        let rows = weights.shape()[1];
        let steps = (0..steps)
            .map(|i| {
                let cols = visible(i);
                let per_head: Vec<Vec<f64>> = (0..heads)
                    .map(|h| {
                        let row = weights.row((b * heads + h) * rows + i);
                        cols.iter().map(|&c| row[c].as_f64()).collect()
                    })
                    .collect();
                let averaged = (0..cols.len())
                    .map(|c| per_head.iter().map(|r| r[c]).sum::<f64>() / heads as f64)
                    .collect();
                AttentionStep {
                    key_len: cols.len(),
                    per_head,
                    averaged,
                }
            })
            .collect();
        Self { steps }
    }
}
