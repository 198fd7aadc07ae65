//! Length-aware decoding: a full-sentence length classifier over the mean
//! of the received encoder states, and a pseudo full-sentence whose unread
//! positions are filled with raw positional-encoding rows.
//!
//! Batched passes use a single memory per sentence, `[h_1..h_J, PE_0..PE_{F-1}]`,
//! and give each target step `i` its own column mask: real column `c` is
//! visible iff `c < g(i)`, fill column `p` iff `g(i) <= p < L_i`. The
//! visible columns of step `i` are exactly the rows of its pseudo
//! full-sentence, in order.

use std::error::Error as StdError;

use thiserror::Error;

use crate::autodiff::{Float, Graph, Mask, Objective, Tensor, TensorError, Var};
use crate::data::{Batch, EOS};
use crate::policy::{PolicyError, PolicySchedule};
use crate::transformer::{head_average, Arch, Forward, ModelError, PaddedIds, PeTable, Seq2Seq, StepOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LafError {
    #[error("invalid argument: {0}")]
    Parameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<TensorError> for LafError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// Distribution over full-sentence lengths; class `c` is length `c + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    pub probs: Vec<f64>,
}

impl LengthDistribution {
    /// Most probable length, ties toward the shorter one.
    pub fn argmax_len(&self) -> usize {
        argmax(&self.probs) + 1
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Length used at step `i`: `g` once `</s>` has been read, otherwise the
/// prediction raised to at least `g`.
pub fn resolve_length(dist: &LengthDistribution, g: usize, eos_seen: bool) -> usize {
    if eos_seen {
        g
    } else {
        dist.argmax_len().max(g)
    }
}

/// Length distribution for the mean of `prefix_states` (`[g, d]`).
pub fn predict_length<F: Float>(model: &Seq2Seq<F>, prefix_states: &Tensor<F>) -> Result<LengthDistribution, LafError> {
    let s = prefix_states.shape();
    if s.len() != 2 || s[1] != model.cfg().d_model {
        return Err(LafError::Parameter(format!(
            "prefix states must be [g, d_model], got {s:?}"
        )));
    }
    let g_len = s[0];
    let mut g = Graph::new();
    let p = g.bind(&model.params);
    let mut fx = Forward::eval(&mut g, &p);
    let h = fx.g.input(prefix_states.clone().reshaped(&[1, g_len, s[1]])?);
    let avg = Tensor::full(&[1, 1, g_len], F::one() / F::from_usize_lossy(g_len));
    let logits = model.arch.length_logits(&mut fx, h, avg)?;
    let probs = fx.g.softmax(logits, None)?;
    Ok(LengthDistribution {
        probs: g.value(probs).to_f64_vec(),
    })
}

/// `h̃ = (h_1..h_g, PE_{g+1}..PE_L)` in 1-based positions; the fill uses
/// table rows `g..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSourceStates<F> {
    pub states: Tensor<F>,
    pub real_prefix_len: usize,
    pub resolved_len: usize,
}

pub fn build_pseudo_full_sentence<F: Float>(
    h_prefix: &Tensor<F>,
    resolved_len: usize,
    pe: &PeTable,
) -> Result<PseudoSourceStates<F>, LafError> {
    let s = h_prefix.shape();
    if s.len() != 2 || s[1] != pe.d_model() {
        return Err(LafError::Parameter(format!(
            "prefix states must be [g, d_model], got {s:?}"
        )));
    }
    let g = s[0];
    if resolved_len < g {
        return Err(LafError::Parameter(format!(
            "length {resolved_len} shorter than prefix {g}"
        )));
    }
    let fill = pe.rows_flat(g, resolved_len - g)?;
    let mut data = h_prefix.data().to_vec();
    data.extend(fill.iter().map(|&x| F::from_f64_lossy(x)));
    Ok(PseudoSourceStates {
        states: Tensor::new(vec![resolved_len, s[1]], data)?,
        real_prefix_len: g,
        resolved_len,
    })
}

/// Source of the pseudo full-sentence length during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthSource {
    /// True source length `J`.
    GroundTruth,
    /// Resolved classifier argmax, with no gradient through the choice.
    Predicted,
    /// `L = g`: no fill.
    Prefix,
}

impl LengthSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::GroundTruth => "oracle",
            Self::Predicted => "predicted",
            Self::Prefix => "prefix",
        }
    }
}

/// Cross-attention context of a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// Every step sees all `J` states.
    Full,
    /// Step `i` sees `h_1..h_{g(i)}`.
    Prefix,
    /// Step `i` sees its pseudo full-sentence.
    Laf(LengthSource),
}

impl ContextMode {
    pub fn uses_length(self) -> bool {
        matches!(self, Self::Laf(_))
    }
}

/// Read count and resolved length of one target step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub g: usize,
    pub l: usize,
}

/// Memory and per-query mask for `contexts[b][i]`. Rows past a sequence's
/// steps see column 0 only. Returns the memory, the mask and the index of
/// the first fill column (equal to `J` without fill).
pub fn cross_memory<F: Float>(
    arch: &Arch,
    fx: &mut Forward<'_, F>,
    h: Var,
    contexts: &[Vec<StepContext>],
    width: usize,
    with_fill: bool,
) -> Result<(Var, Mask, usize), LafError> {
    let (b, j, d) = {
        let s = fx.g.shape(h);
        (s[0], s[1], s[2])
    };
    if contexts.len() != b {
        return Err(LafError::Parameter(format!(
            "{} contexts for batch of {b}",
            contexts.len()
        )));
    }
    for s in contexts.iter().flatten() {
        if s.g == 0 || s.g > j || s.l < s.g {
            return Err(LafError::Parameter(format!("bad step context {s:?} for {j} states")));
        }
    }
    if !with_fill {
        let mask = Mask::from_fn(b, width, j, |bi, i, c| match contexts[bi].get(i) {
            Some(s) => c < s.g,
            None => c == 0,
        });
        return Ok((h, mask, j));
    }
    let fill = contexts.iter().flatten().map(|s| s.l).max().unwrap_or(1).max(1);
    let rows = arch.pe.rows_flat(0, fill)?;
    let mut data = Vec::with_capacity(b * fill * d);
    for _ in 0..b {
        data.extend_from_slice(rows);
    }
    let pe = fx.g.input(Tensor::from_f64(&[b, fill, d], &data)?);
    let memory = fx.g.concat(&[h, pe], 1)?;
    let mask = Mask::from_fn(b, width, j + fill, |bi, i, c| match contexts[bi].get(i) {
        Some(s) if c < j => c < s.g,
        Some(s) => (s.g..s.l).contains(&(c - j)),
        None => c == 0,
    });
    Ok((memory, mask, j))
}

/// `[B, I, J]` prefix-averaging matrix: row `i` of element `b` holds `1/g`
/// on its first `g` columns. Rows past a sequence's steps average column 0.
pub fn prefix_average<F: Float>(contexts: &[Vec<StepContext>], width: usize, j: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[contexts.len(), width, j]);
    let data = t.data_mut();
    for (b, steps) in contexts.iter().enumerate() {
        for i in 0..width {
            let row = &mut data[(b * width + i) * j..(b * width + i + 1) * j];
            let g = steps.get(i).map_or(1, |s| s.g);
            let w = F::one() / F::from_usize_lossy(g);
            row[..g].iter_mut().for_each(|x| *x = w);
        }
    }
    t
}

/// Length-classifier target for source length `j`, clamped to the last
/// class; the flag reports clamping.
pub fn length_class(j: usize, classes: usize) -> (usize, bool) {
    if j > classes {
        (classes - 1, true)
    } else {
        (j - 1, false)
    }
}

/// Forward pass of a batch under a context mode.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub h: Var,
    pub decoder: StepOutput,
    /// `[B, I, N]` length logits in LAF modes.
    pub length_logits: Option<Var>,
    pub contexts: Vec<Vec<StepContext>>,
    pub fill_offset: usize,
}

pub fn forward<F: Float>(
    arch: &Arch,
    fx: &mut Forward<'_, F>,
    batch: &Batch,
    schedules: &[PolicySchedule],
    mode: ContextMode,
) -> Result<ForwardOutput, LafError> {
    let b = batch.size();
    let width = batch.tgt_in.width;
    let src_lens = batch.src_lens();
    let steps = batch.tgt_steps();
    if mode != ContextMode::Full && schedules.len() != b {
        return Err(LafError::Parameter(format!(
            "{} schedules for batch of {b}",
            schedules.len()
        )));
    }
    let h = arch.encode(fx, &batch.src)?;
    let read = |bi: usize, i: usize| -> Result<usize, LafError> {
        match mode {
            ContextMode::Full => Ok(src_lens[bi]),
            _ => schedules[bi]
                .g
                .get(i)
                .copied()
                .filter(|&g| (1..=src_lens[bi]).contains(&g))
                .ok_or_else(|| LafError::Parameter(format!("schedule {bi} invalid at step {}", i + 1))),
        }
    };
    let mut contexts: Vec<Vec<StepContext>> = (0..b)
        .map(|bi| {
            (0..steps[bi])
                .map(|i| read(bi, i).map(|g| StepContext { g, l: g }))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut length_logits = None;
    if let ContextMode::Laf(source) = mode {
        let avg = prefix_average(&contexts, width, batch.src.width);
        let logits = arch.length_logits(fx, h, avg)?;
        let n = arch.cfg.length_classes;
        for (bi, steps) in contexts.iter_mut().enumerate() {
            let j = src_lens[bi];
            for (i, s) in steps.iter_mut().enumerate() {
                s.l = match source {
                    LengthSource::GroundTruth => j,
                    LengthSource::Prefix => s.g,
                    LengthSource::Predicted => {
                        let row = fx.g.value(logits).row(bi * width + i);
                        let dist = LengthDistribution {
                            probs: row.iter().map(|x| x.as_f64()).collect(),
                        };
                        resolve_length(&dist, s.g, s.g == j).min(n.max(s.g))
                    }
                };
            }
        }
        length_logits = Some(logits);
    }
    let (memory, mask, fill_offset) = cross_memory(arch, fx, h, &contexts, width, mode.uses_length())?;
    let decoder = arch.decode(fx, &batch.tgt_in, memory, &mask)?;
    Ok(ForwardOutput {
        h,
        decoder,
        length_logits,
        contexts,
        fill_offset,
    })
}

/// `total = ce + len`, all summed (not averaged) over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub len: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, len: f64) -> Self {
        Self {
            ce,
            len,
            total: ce + len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Differentiable `ce + len`.
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub n_tokens: usize,
    /// Steps whose true length exceeded the last length class.
    pub clamped: usize,
    /// Steps whose classifier argmax equalled the clamped true length.
    pub len_correct: usize,
    pub len_steps: usize,
    pub length_source: Option<LengthSource>,
}

/// Translation cross-entropy (with `smoothing`) plus, in LAF modes, the
/// unsmoothed length loss `-Σ_i log p(J | x_{≤g(i)})` over every target step.
pub fn laf_losses<F: Float>(
    arch: &Arch,
    fx: &mut Forward<'_, F>,
    batch: &Batch,
    schedules: &[PolicySchedule],
    mode: ContextMode,
    smoothing: f64,
) -> Result<LossOutput, LafError> {
    let out = forward(arch, fx, batch, schedules, mode)?;
    let ce =
        fx.g.cross_entropy(out.decoder.logits, &batch.targets, F::from_f64_lossy(smoothing))?;
    let ce_value = fx.g.value(ce).data()[0].as_f64();
    let mut result = LossOutput {
        total: ce,
        breakdown: LossBreakdown::new(ce_value, 0.0),
        n_tokens: batch.n_tokens(),
        clamped: 0,
        len_correct: 0,
        len_steps: 0,
        length_source: None,
    };
    if let (Some(logits), ContextMode::Laf(source)) = (out.length_logits, mode) {
        let width = batch.tgt_in.width;
        let n = arch.cfg.length_classes;
        let mut targets = vec![None; batch.size() * width];
        for (bi, steps) in out.contexts.iter().enumerate() {
            let (class, clamped) = length_class(batch.src_lens()[bi], n);
            for i in 0..steps.len() {
                targets[bi * width + i] = Some(class);
                result.clamped += usize::from(clamped);
                let row = fx.g.value(logits).row(bi * width + i);
                let probs: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
                result.len_correct += usize::from(argmax(&probs) == class);
                result.len_steps += 1;
            }
        }
        let len = fx.g.cross_entropy(logits, &targets, F::zero())?;
        let len_value = fx.g.value(len).data()[0].as_f64();
        result.total = fx.g.add(ce, len)?;
        result.breakdown = LossBreakdown::new(ce_value, len_value);
        result.length_source = Some(source);
    }
    Ok(result)
}

/// A fixed batch and mode as a differentiable objective.
pub struct LossObjective<'a> {
    pub arch: &'a Arch,
    pub batch: &'a Batch,
    pub schedules: &'a [PolicySchedule],
    pub mode: ContextMode,
    pub smoothing: f64,
}

impl Objective for LossObjective<'_> {
    fn loss<F: Float>(&self, g: &mut Graph<F>, params: &[Var]) -> Result<Var, Box<dyn StdError + Send + Sync>> {
        let mut fx = Forward::eval(g, params);
        Ok(laf_losses(
            self.arch,
            &mut fx,
            self.batch,
            self.schedules,
            self.mode,
            self.smoothing,
        )?
        .total)
    }
}

/// Length distribution for the first `g` rows of `h` (`[1, J, d]`).
pub fn length_distribution<F: Float>(
    arch: &Arch,
    fx: &mut Forward<'_, F>,
    h: Var,
    g: usize,
) -> Result<LengthDistribution, LafError> {
    let j = fx.g.shape(h)[1];
    if g == 0 || g > j {
        return Err(LafError::Parameter(format!("prefix length {g} outside 1..={j}")));
    }
    let avg = prefix_average(&[vec![StepContext { g, l: g }]], 1, j);
    let logits = arch.length_logits(fx, h, avg)?;
    let probs = fx.g.softmax(logits, None)?;
    Ok(LengthDistribution {
        probs: fx.g.value(probs).to_f64_vec(),
    })
}

/// Result of decoding the last position of a single sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LastStep {
    pub logits: Vec<f64>,
    /// Head-averaged final-layer cross-attention over positions `1..=L`
    /// (real states first, then fill).
    pub attention: Vec<f64>,
}

/// Decodes `tgt_in` (one sentence, `<s>`-prefixed) where row `t` uses
/// `contexts[t]`, and returns the last row.
pub fn decode_last<F: Float>(
    arch: &Arch,
    fx: &mut Forward<'_, F>,
    h: Var,
    tgt_in: &[usize],
    contexts: &[StepContext],
    with_fill: bool,
) -> Result<LastStep, LafError> {
    if contexts.len() != tgt_in.len() || tgt_in.is_empty() {
        return Err(LafError::Parameter(format!(
            "{} contexts for {} decoder inputs",
            contexts.len(),
            tgt_in.len()
        )));
    }
    let ctx = vec![contexts.to_vec()];
    let (memory, mask, offset) = cross_memory(arch, fx, h, &ctx, tgt_in.len(), with_fill)?;
    let out = arch.decode(fx, &PaddedIds::single(tgt_in)?, memory, &mask)?;
    let last = tgt_in.len() - 1;
    let logits = fx.g.value(out.logits).row(last).iter().map(|x| x.as_f64()).collect();
    let avg = head_average(fx.g.value(out.cross_weights), arch.cfg.n_heads);
    let row = &avg[0][last];
    let s = contexts[last];
    let attention = (0..s.l)
        .map(|p| if p < s.g { row[p] } else { row[offset + p] })
        .collect();
    Ok(LastStep { logits, attention })
}

/// Output of [`laf_step_decode`].
#[derive(Clone, Debug)]
pub struct LafStep<F> {
    pub logits: Vec<f64>,
    pub length: LengthDistribution,
    pub pseudo: PseudoSourceStates<F>,
}

/// Logits of target step `i` (1-based) given the source tokens read so far
/// (at least `g(i)`), the `<s>`-prefixed previous targets (`i` ids) and a
/// schedule. Earlier steps use their own `g` and resolved length.
pub fn laf_step_decode<F: Float>(
    model: &Seq2Seq<F>,
    src_prefix: &[usize],
    prev_targets: &[usize],
    schedule: &PolicySchedule,
    i: usize,
    source: LengthSource,
    src_len: usize,
) -> Result<LafStep<F>, LafError> {
    if i == 0 || i > schedule.len() || prev_targets.len() != i {
        return Err(LafError::Parameter(format!(
            "step {i} with {} previous targets and {} scheduled steps",
            prev_targets.len(),
            schedule.len()
        )));
    }
    let gi = schedule.g[i - 1];
    if gi > src_prefix.len() {
        return Err(LafError::Parameter(format!(
            "step {i} reads {gi} tokens, only {} given",
            src_prefix.len()
        )));
    }
    let arch = &model.arch;
    let mut graph = Graph::new();
    let p = graph.bind(&model.params);
    let mut fx = Forward::eval(&mut graph, &p);
    let h = arch.encode(&mut fx, &PaddedIds::single(&src_prefix[..gi])?)?;
    let mut contexts = Vec::with_capacity(i);
    let mut dist = None;
    for t in 0..i {
        let g = schedule.g[t];
        let d = length_distribution(arch, &mut fx, h, g)?;
        let l = match source {
            LengthSource::GroundTruth => src_len,
            LengthSource::Prefix => g,
            LengthSource::Predicted => {
                resolve_length(&d, g, src_prefix[g - 1] == EOS).min(arch.cfg.length_classes.max(g))
            }
        };
        contexts.push(StepContext { g, l });
        dist = Some(d);
    }
    let last = decode_last(arch, &mut fx, h, prev_targets, &contexts, true)?;
    let hv = fx.g.value(h);
    let d = arch.cfg.d_model;
    let prefix = Tensor::new(vec![gi, d], hv.data()[..gi * d].to_vec())?;
    let pseudo = build_pseudo_full_sentence(&prefix, contexts[i - 1].l, &arch.pe)?;
    Ok(LafStep {
        logits: last.logits,
        length: dist.expect("i >= 1"),
        pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{synth_task, Corpus, ParallelText, SynthKind};
    use crate::policy::wait_k_schedule;
    use crate::transformer::{positional_encoding, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 16,
            max_positions: 16,
            src_vocab: 8,
            tgt_vocab: 8,
            dropout: 0.0,
            unidirectional_encoder: true,
            length_classes: 12,
        }
    }

    fn corpus() -> Corpus {
        let text: ParallelText = synth_task(SynthKind::Reverse, 4, 2, 6, 6, 3).unwrap();
        Corpus::build(&text, 1, 16).unwrap()
    }

    fn schedules(batch: &Batch, k: usize) -> Vec<PolicySchedule> {
        batch
            .src_lens()
            .iter()
            .zip(batch.tgt_steps())
            .map(|(&j, &i)| wait_k_schedule(k, j, i).unwrap())
            .collect()
    }

    fn dist(argmax_len: usize, n: usize) -> LengthDistribution {
        let mut probs = vec![0.01; n];
        probs[argmax_len - 1] = 0.9;
        LengthDistribution { probs }
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve_length(&dist(10, 16), 4, false), 10);
        assert_eq!(resolve_length(&dist(3, 16), 4, false), 4);
        assert_eq!(resolve_length(&dist(12, 16), 7, true), 7);
    }

    #[test]
    fn zero_w_gives_uniform_lengths() {
        let mut m = Seq2Seq::<f64>::new(cfg(), 0).unwrap();
        let w = m.arch.layout.len_w;
        m.params.get_mut(w).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let h = Tensor::from_f64(&[3, 16], &(0..48).map(|x| x as f64 / 10.0).collect::<Vec<_>>()).unwrap();
        let d = predict_length(&m, &h).unwrap();
        assert!(d.probs.iter().all(|p| (p - 1.0 / 12.0).abs() < 1e-12));
        assert_eq!(d.argmax_len(), 1);
    }

    #[test]
    fn random_weights_give_a_distribution() {
        let m = Seq2Seq::<f32>::new(cfg(), 4).unwrap();
        let h = Tensor::from_f64(&[2, 16], &(0..32).map(|x| (x as f64).sin()).collect::<Vec<_>>()).unwrap();
        let d = predict_length(&m, &h).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(predict_length(&m, &Tensor::<f32>::zeros(&[2, 8])).is_err());
    }

    #[test]
    fn pseudo_sentence_rows() {
        let pe = PeTable::new(8, 4).unwrap();
        let h = Tensor::<f64>::from_f64(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let same = build_pseudo_full_sentence(&h, 2, &pe).unwrap();
        assert_eq!(same.states, h);
        let full = build_pseudo_full_sentence(&h, 4, &pe).unwrap();
        assert_eq!(full.states.data()[..8], h.data()[..]);
        assert_eq!(full.states.row(2), &positional_encoding(2, 4).unwrap()[..]);
        assert_eq!(full.states.row(3), &positional_encoding(3, 4).unwrap()[..]);
        assert!(build_pseudo_full_sentence(&h, 1, &pe).is_err());
        assert!(build_pseudo_full_sentence(&h, 9, &pe).is_err());
    }

    fn losses(m: &Seq2Seq<f64>, batch: &Batch, scheds: &[PolicySchedule], mode: ContextMode) -> LossOutput {
        let mut g = Graph::new();
        let p = g.bind(&m.params);
        let mut fx = Forward::eval(&mut g, &p);
        laf_losses(&m.arch, &mut fx, batch, scheds, mode, 0.1).unwrap()
    }

    #[test]
    fn uniform_predictor_length_loss_is_steps_times_log_classes() {
        let c = corpus();
        let mut m = Seq2Seq::<f64>::new(cfg(), 1).unwrap();
        let w = m.arch.layout.len_w;
        m.params.get_mut(w).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let batch = Batch::new(&c.pairs, &[0, 1, 2]).unwrap();
        let scheds = schedules(&batch, 2);
        let out = losses(&m, &batch, &scheds, ContextMode::Laf(LengthSource::GroundTruth));
        let steps: usize = batch.tgt_steps().iter().sum();
        let expected = steps as f64 * 12f64.ln();
        assert!(
            (out.breakdown.len - expected).abs() < 1e-9,
            "{} vs {expected}",
            out.breakdown.len
        );
        assert_eq!(out.breakdown.total, out.breakdown.ce + out.breakdown.len);
        assert_eq!(out.length_source, Some(LengthSource::GroundTruth));
    }

    #[test]
    fn initial_ce_near_uniform() {
        let c = corpus();
        let m = Seq2Seq::<f64>::new(cfg(), 2).unwrap();
        let batch = Batch::new(&c.pairs, &[0, 1, 2, 3, 4, 5]).unwrap();
        let scheds = schedules(&batch, 2);
        let mut g = Graph::new();
        let p = g.bind(&m.params);
        let mut fx = Forward::eval(&mut g, &p);
        let out = laf_losses(
            &m.arch,
            &mut fx,
            &batch,
            &scheds,
            ContextMode::Laf(LengthSource::GroundTruth),
            0.0,
        )
        .unwrap();
        let expected = batch.n_tokens() as f64 * 8f64.ln();
        let ratio = out.breakdown.ce / expected;
        assert!((0.9..1.1).contains(&ratio), "ratio {ratio}");
    }

    fn logits_of(m: &Seq2Seq<f32>, batch: &Batch, scheds: &[PolicySchedule], mode: ContextMode) -> Vec<f32> {
        let mut g = Graph::new();
        let p = g.bind(&m.params);
        let mut fx = Forward::eval(&mut g, &p);
        let out = forward(&m.arch, &mut fx, batch, scheds, mode).unwrap();
        g.value(out.decoder.logits).data().to_vec()
    }

    #[test]
    fn prefix_length_reproduces_plain_prefix_bit_exactly() {
        let c = corpus();
        let m = Seq2Seq::<f32>::new(cfg(), 3).unwrap();
        let batch = Batch::new(&c.pairs, &[0, 1, 2, 3]).unwrap();
        let scheds = schedules(&batch, 2);
        assert_eq!(
            logits_of(&m, &batch, &scheds, ContextMode::Laf(LengthSource::Prefix)),
            logits_of(&m, &batch, &scheds, ContextMode::Prefix)
        );
    }

    #[test]
    fn full_read_reproduces_full_sentence_bit_exactly() {
        let c = corpus();
        let m = Seq2Seq::<f32>::new(cfg(), 3).unwrap();
        let batch = Batch::new(&c.pairs, &[0, 1, 2, 3]).unwrap();
        let scheds = schedules(&batch, 16);
        let full = logits_of(&m, &batch, &scheds, ContextMode::Full);
        assert_eq!(logits_of(&m, &batch, &scheds, ContextMode::Prefix), full);
        assert_eq!(
            logits_of(&m, &batch, &scheds, ContextMode::Laf(LengthSource::GroundTruth)),
            full
        );
    }

    #[test]
    fn predicted_lengths_never_below_read_count() {
        let c = corpus();
        let m = Seq2Seq::<f32>::new(cfg(), 6).unwrap();
        let batch = Batch::new(&c.pairs, &[0, 1, 2, 3, 4, 5]).unwrap();
        let scheds = schedules(&batch, 1);
        let mut g = Graph::new();
        let p = g.bind(&m.params);
        let mut fx = Forward::eval(&mut g, &p);
        let out = forward(
            &m.arch,
            &mut fx,
            &batch,
            &scheds,
            ContextMode::Laf(LengthSource::Predicted),
        )
        .unwrap();
        for (bi, steps) in out.contexts.iter().enumerate() {
            for s in steps {
                assert!(s.l >= s.g);
                if s.g == batch.src_lens()[bi] {
                    assert_eq!(s.l, s.g);
                }
            }
        }
    }

    #[test]
    fn step_decode_ignores_unread_tokens_and_masks_beyond_length() {
        let m = Seq2Seq::<f32>::new(cfg(), 8).unwrap();
        let sched = wait_k_schedule(2, 5, 4).unwrap();
        let a = laf_step_decode(&m, &[4, 5, 6, 7, 3], &[2, 4, 5], &sched, 3, LengthSource::Predicted, 5).unwrap();
        let b = laf_step_decode(&m, &[4, 5, 6, 7, 6], &[2, 4, 5], &sched, 3, LengthSource::Predicted, 5).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.pseudo.real_prefix_len, 4);
        assert!(a.pseudo.resolved_len >= 4);

        let mut graph = Graph::new();
        let p = graph.bind(&m.params);
        let mut fx = Forward::eval(&mut graph, &p);
        let h = m.arch.encode(&mut fx, &PaddedIds::single(&[4, 5, 6]).unwrap()).unwrap();
        let ctx = [StepContext { g: 2, l: 5 }, StepContext { g: 3, l: 4 }];
        let last = decode_last(&m.arch, &mut fx, h, &[2, 4], &ctx, true).unwrap();
        assert_eq!(last.attention.len(), 4);
        assert!((last.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn union_memory_matches_literal_pseudo_sentence() {
        let m = Seq2Seq::<f64>::new(cfg(), 9).unwrap();
        let mut graph = Graph::new();
        let p = graph.bind(&m.params);
        let mut fx = Forward::eval(&mut graph, &p);
        let h = m
            .arch
            .encode(&mut fx, &PaddedIds::single(&[4, 5, 6, 7]).unwrap())
            .unwrap();
        let ctx = [StepContext { g: 2, l: 6 }];
        let union = decode_last(&m.arch, &mut fx, h, &[2], &ctx, true).unwrap();
        let d = 16;
        let prefix = Tensor::new(vec![2, d], fx.g.value(h).data()[..2 * d].to_vec()).unwrap();
        let pseudo = build_pseudo_full_sentence(&prefix, 6, &m.arch.pe).unwrap();
        let lit = fx.g.input(pseudo.states.reshaped(&[1, 6, d]).unwrap());
        let mask = Mask::from_fn(1, 1, 6, |_, _, _| true);
        let out = m
            .arch
            .decode(&mut fx, &PaddedIds::single(&[2]).unwrap(), lit, &mask)
            .unwrap();
        for (a, b) in union.logits.iter().zip(fx.g.value(out.logits).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_flow_through_both_losses() {
        let c = corpus();
        let m = Seq2Seq::<f64>::new(
            ModelConfig {
                n_enc_layers: 1,
                n_dec_layers: 1,
                ..cfg()
            },
            5,
        )
        .unwrap();
        let batch = Batch::new(&c.pairs, &[0, 1]).unwrap();
        let scheds = schedules(&batch, 2);
        let obj = LossObjective {
            arch: &m.arch,
            batch: &batch,
            schedules: &scheds,
            mode: ContextMode::Laf(LengthSource::GroundTruth),
            smoothing: 0.1,
        };
        let report = grad_check(&m.params, &obj, 1e-5, |_| ()).unwrap();
        assert!(report.passed, "{:?}", report.failing_groups().collect::<Vec<_>>());
    }
}
