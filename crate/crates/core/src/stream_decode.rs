//! Streaming simulation: the source is revealed token by token as the
//! policy dictates, targets are decoded greedily, and every step is
//! recorded.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Float, Graph};
use crate::data::{Vocabulary, BOS, EOS};
use crate::laf::{
    decode_last, length_distribution, resolve_length, LafError, LengthDistribution, LengthSource, StepContext,
};
use crate::policy::{Policy, PolicyError};
use crate::transformer::{Forward, ModelError, PaddedIds, Seq2Seq};

/// Version of the trace record layout.
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("empty source")]
    EmptySource,
    #[error("max_len must be at least 1")]
    MaxLen,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Laf(#[from] LafError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty g trace")]
    EmptyTrace,
    #[error("g trace invalid at step {step}: g = {g} with source length {src_len}")]
    BadTrace { step: usize, g: usize, src_len: usize },
    #[error("trace line {line}: {reason}")]
    TraceFormat { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How cross-attention context is formed while streaming.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Real source states only.
    Plain,
    /// Pseudo full-sentence with lengths from the given source.
    Laf(LengthSource),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub g: usize,
    pub l_resolved: usize,
    pub emitted_id: usize,
    /// Head-averaged final-layer cross-attention over positions `1..=l_resolved`.
    pub attention_row: Vec<f64>,
    /// Index in `attention_row` of the first fill column (`g`).
    pub fill_start: usize,
    /// Classifier argmax length, when a length distribution was consulted.
    pub length_argmax: Option<usize>,
}

/// Per-sentence decoding state. The revealed count never decreases and the
/// model never reads past it.
#[derive(Clone, Debug)]
pub struct StreamSession {
    source: Vec<usize>,
    revealed: usize,
    pub emitted: Vec<usize>,
    pub records: Vec<StepRecord>,
    contexts: Vec<StepContext>,
    length_cache: Option<(usize, LengthDistribution)>,
}

impl StreamSession {
    pub fn new(source: &[usize]) -> Result<Self, StreamError> {
        if source.is_empty() {
            return Err(StreamError::EmptySource);
        }
        Ok(Self {
            source: source.to_vec(),
            revealed: 0,
            emitted: Vec::new(),
            records: Vec::new(),
            contexts: Vec::new(),
            length_cache: None,
        })
    }

    pub fn revealed(&self) -> usize {
        self.revealed
    }

    pub fn src_len(&self) -> usize {
        self.source.len()
    }

    /// Reveals source tokens up to `g` (never shrinks).
    pub fn reveal_to(&mut self, g: usize) {
        self.revealed = self.revealed.max(g.min(self.source.len()));
    }

    pub fn finished(&self) -> bool {
        self.emitted.last() == Some(&EOS)
    }

    pub fn g_trace(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.g).collect()
    }

    /// Decodes one target token with the current revealed prefix.
    pub fn step<F: Float>(&mut self, model: &Seq2Seq<F>, mode: DecodeMode) -> Result<usize, StreamError> {
        let arch = &model.arch;
        let g = self.revealed;
        if g == 0 {
            return Err(StreamError::EmptySource);
        }
        let prefix = &self.source[..g];
        let mut graph = Graph::new();
        let p = graph.bind(&model.params);
        let mut fx = Forward::eval(&mut graph, &p);
        let h = arch.encode(&mut fx, &PaddedIds::single(prefix)?)?;
        let (l, length_argmax) = match mode {
            DecodeMode::Plain => (g, None),
            DecodeMode::Laf(source) => {
                let dist = match &self.length_cache {
                    Some((cg, d)) if *cg == g => d.clone(),
                    _ => {
                        let d = length_distribution(arch, &mut fx, h, g)?;
                        self.length_cache = Some((g, d.clone()));
                        d
                    }
                };
                let eos_seen = g == self.source.len() || prefix[g - 1] == EOS;
                let l = match source {
                    LengthSource::GroundTruth => self.source.len(),
                    LengthSource::Prefix => g,
                    LengthSource::Predicted => resolve_length(&dist, g, eos_seen).min(arch.cfg.length_classes.max(g)),
                };
                (l, Some(dist.argmax_len()))
            }
        };
        self.contexts.push(StepContext { g, l });
        let tgt_in: Vec<usize> = [BOS].into_iter().chain(self.emitted.iter().copied()).collect();
        let with_fill = matches!(mode, DecodeMode::Laf(_));
        let last = match decode_last(arch, &mut fx, h, &tgt_in, &self.contexts, with_fill) {
            Ok(last) => last,
            Err(e) => {
                self.contexts.pop();
                return Err(e.into());
            }
        };
        let y = argmax(&last.logits);
        self.emitted.push(y);
        self.records.push(StepRecord {
            step: self.emitted.len(),
            g,
            l_resolved: l,
            emitted_id: y,
            attention_row: last.attention,
            fill_start: g,
            length_argmax,
        });
        Ok(y)
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

/// Default decoding cap `2·J + 10`.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Greedy streaming decode of `source` (ending in `</s>`). Stops at `</s>`
/// or after `max_len` tokens (default `2·J + 10`), never more than the
/// decoder's position table holds. The hypothesis excludes the final `</s>`.
pub fn simulate<F: Float>(
    model: &Seq2Seq<F>,
    policy: &Policy,
    source: &[usize],
    mode: DecodeMode,
    max_len: Option<usize>,
) -> Result<(Vec<usize>, StreamSession), StreamError> {
    let mut session = StreamSession::new(source)?;
    let j = source.len();
    policy.check(j)?;
    let max_len = max_len
        .unwrap_or_else(|| default_max_len(j))
        .min(model.cfg().max_positions);
    if max_len == 0 {
        return Err(StreamError::MaxLen);
    }
    for t in 1..=max_len {
        session.reveal_to(policy.g(t, j));
        if session.step(model, mode)? == EOS {
            break;
        }
    }
    let hyp = session.emitted.iter().copied().take_while(|&y| y != EOS).collect();
    Ok((hyp, session))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub g: Vec<usize>,
    /// 1-based.
    pub tau: usize,
    pub al: f64,
    pub src_len: usize,
    pub tgt_len: usize,
}

/// `AL = (1/τ) Σ_{t=1..τ} [g(t) − (t−1)·|x|/|y|]`, with `τ` the first step
/// reading the whole source, or the trace length if none does.
pub fn average_lagging(g: &[usize], src_len: usize, tgt_len: usize) -> Result<LatencyReport, StreamError> {
    if g.is_empty() || tgt_len == 0 || src_len == 0 {
        return Err(StreamError::EmptyTrace);
    }
    for (t, w) in g.iter().enumerate() {
        if *w == 0 || *w > src_len || (t > 0 && *w < g[t - 1]) {
            return Err(StreamError::BadTrace {
                step: t + 1,
                g: *w,
                src_len,
            });
        }
    }
    let tau = g.iter().position(|&x| x == src_len).map_or(g.len(), |t| t + 1);
    let gamma = tgt_len as f64 / src_len as f64;
    let sum: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(t, &x)| x as f64 - t as f64 / gamma)
        .sum();
    Ok(LatencyReport {
        g: g.to_vec(),
        tau,
        al: sum / tau as f64,
        src_len,
        tgt_len,
    })
}

/// Latency of a finished session; `|y|` counts every emitted token
/// including `</s>`, matching `J`, which counts the source `</s>`.
pub fn session_latency(session: &StreamSession) -> Result<LatencyReport, StreamError> {
    average_lagging(&session.g_trace(), session.src_len(), session.emitted.len())
}

/// One JSON-lines trace record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub v: u32,
    /// Label of the decoding system, e.g. `wait3-laf`.
    pub system: String,
    /// 0-based sentence index.
    pub sent: usize,
    pub step: usize,
    pub g: usize,
    #[serde(rename = "L_resolved")]
    pub l_resolved: usize,
    pub emitted_id: usize,
    pub token: String,
    pub attention_row: Vec<f64>,
    pub fill_start: usize,
    pub src_len: usize,
    /// `oracle`, `predicted` or `prefix` for length-aware systems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_argmax: Option<usize>,
}

pub fn trace_records(
    session: &StreamSession,
    system: &str,
    sent: usize,
    mode: DecodeMode,
    vocab: Option<&Vocabulary>,
) -> Vec<TraceRecord> {
    let length_source = match mode {
        DecodeMode::Plain => None,
        DecodeMode::Laf(s) => Some(s.name().to_string()),
    };
    session
        .records
        .iter()
        .map(|r| TraceRecord {
            v: TRACE_VERSION,
            system: system.to_string(),
            sent,
            step: r.step,
            g: r.g,
            l_resolved: r.l_resolved,
            emitted_id: r.emitted_id,
            token: vocab.map_or_else(|| r.emitted_id.to_string(), |v| v.token(r.emitted_id).to_string()),
            attention_row: r.attention_row.clone(),
            fill_start: r.fill_start,
            src_len: session.src_len(),
            length_source: length_source.clone(),
            length_argmax: r.length_argmax,
        })
        .collect()
}

pub fn write_trace_jsonl<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<(), StreamError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses JSON-lines traces; blank lines are skipped and errors carry the
/// 1-based line number.
pub fn read_trace_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, StreamError> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord = serde_json::from_str(&line).map_err(|e| StreamError::TraceFormat {
            line: n + 1,
            reason: e.to_string(),
        })?;
        if r.v != TRACE_VERSION {
            return Err(StreamError::TraceFormat {
                line: n + 1,
                reason: format!("unsupported version {}", r.v),
            });
        }
        records.push(r);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;

    fn model(seed: u64) -> Seq2Seq<f32> {
        Seq2Seq::new(
            ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ffn: 16,
                max_positions: 40,
                src_vocab: 10,
                tgt_vocab: 10,
                dropout: 0.0,
                unidirectional_encoder: true,
                length_classes: 20,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn al_examples() {
        assert_eq!(average_lagging(&[3, 4, 5, 6, 6, 6], 6, 6).unwrap().al, 3.0);
        assert_eq!(average_lagging(&[3, 4, 5, 6, 6, 6], 6, 6).unwrap().tau, 4);
        let full = average_lagging(&[6; 6], 6, 6).unwrap();
        assert_eq!((full.tau, full.al), (1, 6.0));
        assert_eq!(average_lagging(&[1, 2], 2, 2).unwrap().al, 1.0);
    }

    #[test]
    fn al_tau_falls_back_to_trace_length() {
        let r = average_lagging(&[1, 2], 5, 2).unwrap();
        assert_eq!(r.tau, 2);
    }

    #[test]
    fn al_rejects_bad_traces() {
        assert!(matches!(average_lagging(&[], 3, 3), Err(StreamError::EmptyTrace)));
        assert!(average_lagging(&[2, 1], 3, 3).is_err());
        assert!(average_lagging(&[4], 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn wait_k_al_equals_k(k in 1usize..=10, extra in 0usize..=40) {
            let n = k + extra;
            let g: Vec<usize> = (1..=n).map(|i| (k + i - 1).min(n)).collect();
            prop_assert_eq!(average_lagging(&g, n, n).unwrap().al, k as f64);
        }

        #[test]
        fn al_monotone_in_g(base in prop::collection::vec(0usize..3, 1..12), bump in 0usize..12) {
            let j = 30;
            let mut g = Vec::new();
            let mut acc = 1;
            for b in base {
                acc = (acc + b).min(j - 1);
                g.push(acc);
            }
            let mut raised = g.clone();
            let at = bump % raised.len();
            for x in raised.iter_mut().skip(at) {
                *x = (*x + 1).min(j - 1);
            }
            let a = average_lagging(&g, j, g.len()).unwrap();
            let b = average_lagging(&raised, j, g.len()).unwrap();
            prop_assert!(b.al >= a.al);
        }
    }

    #[test]
    fn wait_one_on_single_token_reads_once() {
        let m = model(1);
        let (_, s) = simulate(&m, &Policy::WaitK(1), &[3], DecodeMode::Plain, None).unwrap();
        assert!(s.records.iter().all(|r| r.g == 1));
        assert!(s.records.len() <= default_max_len(1));
        assert!(s.finished() || s.records.len() == default_max_len(1));
    }

    #[test]
    fn emissions_ignore_unread_tokens() {
        let m = model(2);
        let src = [4, 5, 6, 7, 8, 9, 3];
        for mode in [DecodeMode::Plain, DecodeMode::Laf(LengthSource::Predicted)] {
            let (_, a) = simulate(&m, &Policy::WaitK(2), &src, mode, Some(6)).unwrap();
            for t in 0..a.records.len() {
                let g = a.records[t].g;
                let mut other = src;
                for x in other.iter_mut().skip(g) {
                    *x = 4 + (*x + 3) % 6;
                }
                let (_, b) = simulate(&m, &Policy::WaitK(2), &other, mode, Some(6)).unwrap();
                assert_eq!(a.emitted[..=t], b.emitted[..=t]);
            }
        }
    }

    #[test]
    fn laf_records_cover_resolved_length() {
        let m = model(3);
        let (_, s) = simulate(
            &m,
            &Policy::WaitK(2),
            &[4, 5, 6, 7, 3],
            DecodeMode::Laf(LengthSource::Predicted),
            Some(8),
        )
        .unwrap();
        for r in &s.records {
            assert!(r.l_resolved >= r.g);
            assert_eq!(r.attention_row.len(), r.l_resolved);
            assert!((r.attention_row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn policy_source_mismatch_errors() {
        let m = model(1);
        let beta = crate::policy::WritingProbMatrix::new(vec![vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let p = Policy::from_beta(&beta).unwrap();
        assert!(matches!(
            simulate(&m, &p, &[4, 3], DecodeMode::Plain, None),
            Err(StreamError::Policy(_))
        ));
        assert!(matches!(
            simulate(&m, &Policy::Full, &[], DecodeMode::Plain, None),
            Err(StreamError::EmptySource)
        ));
    }

    #[test]
    fn trace_round_trip_and_line_numbers() {
        let m = model(4);
        let mode = DecodeMode::Laf(LengthSource::Predicted);
        let (_, s) = simulate(&m, &Policy::WaitK(1), &[4, 5, 3], mode, Some(4)).unwrap();
        let recs = trace_records(&s, "w1", 0, mode, None);
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"L_resolved\""));
        assert_eq!(read_trace_jsonl(text.as_bytes()).unwrap(), recs);
        let bad = format!("{}\nnot json\n", text.lines().next().unwrap());
        assert!(matches!(
            read_trace_jsonl(bad.as_bytes()),
            Err(StreamError::TraceFormat { line: 2, .. })
        ));
    }
}
