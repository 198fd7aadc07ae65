//! Analysis over decoding traces: per-position average attention, bias
//! ratio, bias-bucketed quality, n-gram duplication, fill-column attention,
//! length-prediction accuracy, BLEU and the prefix decomposition identity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{self, Write};

use thiserror::Error;

use crate::autodiff::SeededRng;
use crate::data::{BOS, EOS, PAD};
use crate::stream_decode::{average_lagging, TraceRecord};

/// Buckets with fewer sentences are dropped from attention reports.
pub const MIN_BUCKET_SENTENCES: usize = 5;

pub const QUINTILE_LABELS: [&str; 5] = ["Bottom", "Low", "Mid", "High", "Top"];

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("empty reference set")]
    EmptyReferences,
    #[error("need at least 5 sentences for quintiles, got {0}")]
    TooFewSentences(usize),
    #[error("n-gram order must be at least 1")]
    NgramOrder,
    #[error("attention report has zero total mass")]
    ZeroAttention,
    #[error("joint sums to {0}, expected 1")]
    Unnormalized(f64),
    #[error("invalid joint: {0}")]
    BadJoint(String),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("trace for system {system} sentence {sent}: {reason}")]
    BadTrace {
        system: String,
        sent: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub g: usize,
    pub l_resolved: usize,
    pub emitted_id: usize,
    pub token: String,
    pub attention_row: Vec<f64>,
    pub fill_start: usize,
    pub length_argmax: Option<usize>,
}

impl TraceStep {
    /// Attention mass on columns at or past `fill_start`.
    pub fn fill_mass(&self) -> f64 {
        self.attention_row.iter().skip(self.fill_start).sum()
    }
}

/// All steps of one decoded sentence, in step order.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceTrace {
    pub sent: usize,
    pub src_len: usize,
    pub length_source: Option<String>,
    pub steps: Vec<TraceStep>,
}

impl SentenceTrace {
    pub fn g(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.g).collect()
    }

    /// Emitted tokens without `<pad>`, `<s>` and `</s>`.
    pub fn hypothesis(&self) -> Vec<String> {
        self.steps
            .iter()
            .filter(|s| !matches!(s.emitted_id, PAD | BOS | EOS))
            .map(|s| s.token.clone())
            .collect()
    }

    /// Average lagging with `|y|` counting every emitted token.
    pub fn average_lagging(&self) -> Option<f64> {
        average_lagging(&self.g(), self.src_len, self.steps.len())
            .ok()
            .map(|r| r.al)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemTraces {
    pub system: String,
    pub sentences: Vec<SentenceTrace>,
}

/// Groups records by system (first-appearance order) and sentence
/// (ascending index). Steps must run `1..=n` without gaps.
pub fn group_traces(records: &[TraceRecord]) -> Result<Vec<SystemTraces>, DiagnosticsError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_system: HashMap<String, BTreeMap<usize, Vec<&TraceRecord>>> = HashMap::new();
    for r in records {
        if !by_system.contains_key(&r.system) {
            order.push(r.system.clone());
        }
        by_system
            .entry(r.system.clone())
            .or_default()
            .entry(r.sent)
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for system in order {
        let sents = by_system.remove(&system).unwrap_or_default();
        let mut sentences = Vec::with_capacity(sents.len());
        for (sent, mut recs) in sents {
            recs.sort_by_key(|r| r.step);
            let bad = |reason: String| DiagnosticsError::BadTrace {
                system: system.clone(),
                sent,
                reason,
            };
            let src_len = recs[0].src_len;
            for (n, r) in recs.iter().enumerate() {
                if r.step != n + 1 {
                    return Err(bad(format!("expected step {}, found {}", n + 1, r.step)));
                }
                if r.src_len != src_len {
                    return Err(bad("inconsistent src_len".into()));
                }
                if r.g == 0 || r.g > src_len || r.fill_start > r.attention_row.len() {
                    return Err(bad(format!(
                        "step {} has g = {} and fill_start = {}",
                        r.step, r.g, r.fill_start
                    )));
                }
            }
            sentences.push(SentenceTrace {
                sent,
                src_len,
                length_source: recs[0].length_source.clone(),
                steps: recs
                    .iter()
                    .map(|r| TraceStep {
                        g: r.g,
                        l_resolved: r.l_resolved,
                        emitted_id: r.emitted_id,
                        token: r.token.clone(),
                        attention_row: r.attention_row.clone(),
                        fill_start: r.fill_start,
                        length_argmax: r.length_argmax,
                    })
                    .collect(),
            });
        }
        out.push(SystemTraces { system, sentences });
    }
    Ok(out)
}

/// Per-position average attention over a set of sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    /// Source length shared by the bucket.
    pub bucket: usize,
    pub sentences: usize,
    /// `Ā_j` for positions `1..=max g`, 0-based.
    pub avg: Vec<f64>,
    /// Steps at which each position was attendable.
    pub counts: Vec<usize>,
}

/// `Ā_j = Σ_i α_ij / Σ_i 1[j ≤ g(i)]`, summed over every step of every
/// sentence given. Fill columns never contribute.
pub fn attention_report<'a, I>(bucket: usize, sentences: I) -> AttentionReport
where
    I: IntoIterator<Item = &'a SentenceTrace>,
{
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut n = 0;
    for s in sentences {
        n += 1;
        for step in &s.steps {
            if step.g > sums.len() {
                sums.resize(step.g, 0.0);
                counts.resize(step.g, 0);
            }
            let real = step.g.min(step.fill_start).min(step.attention_row.len());
            for (j, a) in step.attention_row[..real].iter().enumerate() {
                sums[j] += a;
            }
            for c in &mut counts[..step.g] {
                *c += 1;
            }
        }
    }
    let avg = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    AttentionReport {
        bucket,
        sentences: n,
        avg,
        counts,
    }
}

/// One report per source length with at least `min_sentences` sentences.
pub fn average_attention(sentences: &[SentenceTrace], min_sentences: usize) -> Vec<AttentionReport> {
    let mut buckets: BTreeMap<usize, Vec<&SentenceTrace>> = BTreeMap::new();
    for s in sentences {
        buckets.entry(s.src_len).or_default().push(s);
    }
    buckets
        .into_iter()
        .filter_map(|(len, group)| {
            if group.len() < min_sentences {
                log::warn!("dropping length bucket {len}: {} sentences", group.len());
                return None;
            }
            Some(attention_report(len, group))
        })
        .collect()
}

/// `Ā_1 / Σ_j Ā_j`.
pub fn bias_ratio(report: &AttentionReport) -> Result<f64, DiagnosticsError> {
    let total: f64 = report.avg.iter().sum();
    if report.avg.is_empty() || total <= 0.0 {
        return Err(DiagnosticsError::ZeroAttention);
    }
    Ok(report.avg[0] / total)
}

/// Bias ratio of each sentence on its own.
pub fn sentence_bias_ratios(sentences: &[SentenceTrace]) -> Result<Vec<f64>, DiagnosticsError> {
    sentences
        .iter()
        .map(|s| bias_ratio(&attention_report(s.src_len, [s])))
        .collect()
}

/// Sentence indices split into five near-equal parts by ascending ratio.
/// Ties keep index order.
pub fn quintile_partition(ratios: &[f64]) -> Result<Vec<Vec<usize>>, DiagnosticsError> {
    let n = ratios.len();
    if n < 5 {
        return Err(DiagnosticsError::TooFewSentences(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
    Ok((0..5).map(|q| idx[q * n / 5..(q + 1) * n / 5].to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuintileBleu {
    pub system: String,
    /// 0 = Bottom, 4 = Top.
    pub quintile: usize,
    pub sentences: usize,
    pub bleu: f64,
}

/// Corpus BLEU of every system on each part of the partition induced by
/// `ratios`, which are shared across systems.
pub fn bias_bucketed_quality<S: AsRef<str>>(
    ratios: &[f64],
    systems: &[(S, Vec<Vec<String>>)],
    references: &[Vec<String>],
) -> Result<Vec<QuintileBleu>, DiagnosticsError> {
    if ratios.len() != references.len() {
        return Err(DiagnosticsError::CountMismatch {
            hyps: ratios.len(),
            refs: references.len(),
        });
    }
    let parts = quintile_partition(ratios)?;
    let mut rows = Vec::new();
    for (name, hyps) in systems {
        if hyps.len() != references.len() {
            return Err(DiagnosticsError::CountMismatch {
                hyps: hyps.len(),
                refs: references.len(),
            });
        }
        for (q, part) in parts.iter().enumerate() {
            let h: Vec<&[String]> = part.iter().map(|&i| hyps[i].as_slice()).collect();
            let r: Vec<&[String]> = part.iter().map(|&i| references[i].as_slice()).collect();
            rows.push(QuintileBleu {
                system: name.as_ref().to_string(),
                quintile: q,
                sentences: part.len(),
                bleu: corpus_bleu(&h, &r)?,
            });
        }
    }
    Ok(rows)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(distinct, total)` n-grams of one sequence.
pub fn ngram_stats<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<(usize, usize), DiagnosticsError> {
    if n == 0 {
        return Err(DiagnosticsError::NgramOrder);
    }
    if tokens.len() < n {
        return Ok((0, 0));
    }
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    Ok((distinct.len(), tokens.len() + 1 - n))
}

/// `1 − distinct/total` n-grams; 0 when there are none.
pub fn duplicate_ngram_proportion<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<f64, DiagnosticsError> {
    let (d, t) = ngram_stats(tokens, n)?;
    Ok(if t == 0 { 0.0 } else { 1.0 - d as f64 / t as f64 })
}

/// Micro-average over sentences: `1 − Σ distinct / Σ total`.
pub fn corpus_duplicate_proportion<T: Eq + Hash, S: AsRef<[T]>>(hyps: &[S], n: usize) -> Result<f64, DiagnosticsError> {
    let (mut d, mut t) = (0, 0);
    for h in hyps {
        let (a, b) = ngram_stats(h.as_ref(), n)?;
        d += a;
        t += b;
    }
    Ok(if t == 0 { 0.0 } else { 1.0 - d as f64 / t as f64 })
}

/// Clipped matches and hypothesis n-gram count.
fn clipped_matches<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn bleu_from_stats(matches: &[f64; 4], totals: &[f64; 4], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || matches.contains(&0.0) {
        return 0.0;
    }
    let log_p: f64 = matches.iter().zip(totals).map(|(m, t)| (m / t).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Corpus BLEU-4 with one reference per hypothesis, in `[0, 1]`.
pub fn corpus_bleu<T: Eq + Hash, S: AsRef<[T]>>(hyps: &[S], refs: &[S]) -> Result<f64, DiagnosticsError> {
    if hyps.len() != refs.len() {
        return Err(DiagnosticsError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if refs.is_empty() {
        return Err(DiagnosticsError::EmptyReferences);
    }
    let (mut matches, mut totals) = ([0.0; 4], [0.0; 4]);
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let (m, t) = clipped_matches(h, rf, n);
            matches[n - 1] += m as f64;
            totals[n - 1] += t as f64;
        }
    }
    Ok(bleu_from_stats(&matches, &totals, c, r))
}

/// Sentence BLEU-4 with add-one smoothing on orders 2..=4.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    let (mut matches, mut totals) = ([0.0; 4], [0.0; 4]);
    for n in 1..=4 {
        let (m, t) = clipped_matches(hyp, reference, n);
        let add = if n >= 2 { 1.0 } else { 0.0 };
        matches[n - 1] = m as f64 + add;
        totals[n - 1] = t as f64 + add;
    }
    bleu_from_stats(&matches, &totals, hyp.len(), reference.len())
}

/// A bucketed mean.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub index: usize,
    pub value: f64,
    pub count: usize,
}

fn curve(sums: BTreeMap<usize, (f64, usize)>) -> Vec<CurvePoint> {
    sums.into_iter()
        .map(|(index, (s, count))| CurvePoint {
            index,
            value: s / count as f64,
            count,
        })
        .collect()
}

/// 0-based quartile of the fraction `num/den`, with `(0, 1/4]` as quartile 0.
pub fn quartile_of(num: usize, den: usize) -> usize {
    ((4 * num).div_ceil(den)).clamp(1, 4) - 1
}

/// Mean fill-column attention mass at each 1-based decoding step.
pub fn fill_attention_curve(sentences: &[SentenceTrace]) -> Vec<CurvePoint> {
    let mut sums = BTreeMap::new();
    for s in sentences {
        for (i, step) in s.steps.iter().enumerate() {
            let e = sums.entry(i + 1).or_insert((0.0, 0));
            e.0 += step.fill_mass();
            e.1 += 1;
        }
    }
    curve(sums)
}

/// Mean fill-column attention mass per quartile of relative step `i/I`.
pub fn fill_attention_by_quartile(sentences: &[SentenceTrace]) -> Vec<CurvePoint> {
    let mut sums = BTreeMap::new();
    for s in sentences {
        let n = s.steps.len();
        for (i, step) in s.steps.iter().enumerate() {
            let e = sums.entry(quartile_of(i + 1, n)).or_insert((0.0, 0));
            e.0 += step.fill_mass();
            e.1 += 1;
        }
    }
    curve(sums)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthAccuracy {
    pub overall: f64,
    /// By number of received words `m`.
    pub by_received: Vec<CurvePoint>,
    /// By quartile of `m/J`.
    pub by_quartile: Vec<CurvePoint>,
}

/// Fraction of steps whose resolved length equals the true source length.
pub fn length_accuracy_curve(sentences: &[SentenceTrace]) -> Option<LengthAccuracy> {
    let mut by_m = BTreeMap::new();
    let mut by_q = BTreeMap::new();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in sentences {
        for step in &s.steps {
            let ok = if step.l_resolved == s.src_len { 1.0 } else { 0.0 };
            let e = by_m.entry(step.g).or_insert((0.0, 0));
            e.0 += ok;
            e.1 += 1;
            let e = by_q.entry(quartile_of(step.g, s.src_len)).or_insert((0.0, 0));
            e.0 += ok;
            e.1 += 1;
            hit += ok as usize;
            total += 1;
        }
    }
    (total > 0).then(|| LengthAccuracy {
        overall: hit as f64 / total as f64,
        by_received: curve(by_m),
        by_quartile: curve(by_q),
    })
}

/// Corpus-level metrics for one system; unavailable entries are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub system: String,
    pub sentences: usize,
    pub bleu: Option<f64>,
    pub al: Option<f64>,
    /// Orders 1..=4.
    pub duplication: Option<[f64; 4]>,
    pub length_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportSelection {
    pub quality: bool,
    pub duplication: bool,
    pub length: bool,
}

impl ReportSelection {
    pub const ALL: Self = Self {
        quality: true,
        duplication: true,
        length: true,
    };
}

pub fn metrics_report(
    traces: &SystemTraces,
    references: Option<&[Vec<String>]>,
    select: ReportSelection,
) -> Result<MetricsReport, DiagnosticsError> {
    let hyps: Vec<Vec<String>> = traces.sentences.iter().map(SentenceTrace::hypothesis).collect();
    let mut report = MetricsReport {
        system: traces.system.clone(),
        sentences: hyps.len(),
        ..Default::default()
    };
    if select.quality {
        if let Some(refs) = references {
            let refs: Vec<&Vec<String>> = traces
                .sentences
                .iter()
                .map(|s| {
                    refs.get(s.sent).ok_or(DiagnosticsError::CountMismatch {
                        hyps: s.sent + 1,
                        refs: refs.len(),
                    })
                })
                .collect::<Result<_, _>>()?;
            report.bleu = Some(corpus_bleu(&hyps, &refs.into_iter().cloned().collect::<Vec<_>>())?);
        }
        let al: Vec<f64> = traces
            .sentences
            .iter()
            .filter_map(SentenceTrace::average_lagging)
            .collect();
        if !al.is_empty() {
            report.al = Some(al.iter().sum::<f64>() / al.len() as f64);
        }
    }
    if select.duplication {
        let mut d = [0.0; 4];
        for (n, v) in d.iter_mut().enumerate() {
            *v = corpus_duplicate_proportion(&hyps, n + 1)?;
        }
        report.duplication = Some(d);
    }
    if select.length && traces.sentences.iter().any(|s| s.length_source.is_some()) {
        report.length_accuracy = length_accuracy_curve(&traces.sentences).map(|a| a.overall);
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn write_avg_attention_csv<W: Write>(mut w: W, reports: &[AttentionReport]) -> io::Result<()> {
    writeln!(w, "bucket,position,avg_attn,count")?;
    for r in reports {
        for (j, (a, c)) in r.avg.iter().zip(&r.counts).enumerate() {
            writeln!(w, "{},{},{},{}", r.bucket, j + 1, a, c)?;
        }
    }
    Ok(())
}

pub fn write_bias_ratio_csv<W: Write>(mut w: W, rows: &[(String, &AttentionReport)]) -> Result<(), DiagnosticsError> {
    writeln!(w, "system,bucket,sentences,bias_ratio")?;
    for (system, r) in rows {
        writeln!(w, "{},{},{},{}", system, r.bucket, r.sentences, bias_ratio(r)?)?;
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsReport]) -> io::Result<()> {
    writeln!(w, "system,sentences,bleu,al,dup1,dup2,dup3,dup4,len_acc")?;
    for r in rows {
        let dup: Vec<String> = (0..4).map(|n| opt(r.duplication.map(|d| d[n]))).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.system,
            r.sentences,
            opt(r.bleu),
            opt(r.al),
            dup.join(","),
            opt(r.length_accuracy)
        )?;
    }
    Ok(())
}

pub fn write_bias_quintiles_csv<W: Write>(mut w: W, rows: &[QuintileBleu]) -> io::Result<()> {
    writeln!(w, "system,quintile,label,sentences,bleu")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.system,
            r.quintile + 1,
            QUINTILE_LABELS[r.quintile],
            r.sentences,
            r.bleu
        )?;
    }
    Ok(())
}

pub fn write_fill_curve_csv<W: Write>(mut w: W, rows: &[(String, Vec<CurvePoint>)]) -> io::Result<()> {
    writeln!(w, "system,step,fill_mass,count")?;
    for (system, points) in rows {
        for p in points {
            writeln!(w, "{},{},{},{}", system, p.index, p.value, p.count)?;
        }
    }
    Ok(())
}

pub fn write_len_accuracy_csv<W: Write>(mut w: W, rows: &[(String, LengthAccuracy)]) -> io::Result<()> {
    writeln!(w, "system,axis,bucket,accuracy,count")?;
    for (system, acc) in rows {
        for p in &acc.by_received {
            writeln!(w, "{},received,{},{},{}", system, p.index, p.value, p.count)?;
        }
        for p in &acc.by_quartile {
            writeln!(w, "{},quartile,{},{},{}", system, p.index + 1, p.value, p.count)?;
        }
    }
    Ok(())
}

/// Explicit joint distribution over fixed-length source and target
/// sequences. Entry order is lexicographic over `(x_1..x_J, y_1..y_I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub alphabet: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub probs: Vec<f64>,
}

impl Joint {
    pub fn new(alphabet: usize, src_len: usize, tgt_len: usize, probs: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if alphabet == 0 || src_len == 0 || tgt_len == 0 {
            return Err(DiagnosticsError::BadJoint(
                "alphabet and lengths must be positive".into(),
            ));
        }
        let size = (src_len + tgt_len)
            .try_into()
            .ok()
            .and_then(|e| alphabet.checked_pow(e))
            .filter(|&s| s <= 1 << 20)
            .ok_or_else(|| DiagnosticsError::BadJoint("table too large".into()))?;
        if probs.len() != size {
            return Err(DiagnosticsError::BadJoint(format!(
                "{} entries, expected {size}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DiagnosticsError::BadJoint("negative or non-finite entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(DiagnosticsError::Unnormalized(sum));
        }
        Ok(Self {
            alphabet,
            src_len,
            tgt_len,
            probs,
        })
    }

    /// Dirichlet(1)-distributed table.
    pub fn random(
        alphabet: usize,
        src_len: usize,
        tgt_len: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, DiagnosticsError> {
        let size = alphabet.pow((src_len + tgt_len) as u32);
        let mut p: Vec<f64> = (0..size).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let s: f64 = p.iter().sum();
        p[0] += 1.0 - s;
        Self::new(alphabet, src_len, tgt_len, p)
    }

    fn digits(&self, mut index: usize) -> Vec<usize> {
        let n = self.src_len + self.tgt_len;
        let mut d = vec![0; n];
        for k in (0..n).rev() {
            d[k] = index % self.alphabet;
            index /= self.alphabet;
        }
        d
    }

    fn prefix_index(&self, digits: &[usize], a: usize, b: usize) -> usize {
        let (x, y) = digits.split_at(self.src_len);
        x[..a].iter().chain(&y[..b]).fold(0, |acc, &d| acc * self.alphabet + d)
    }

    /// `table[a][b][prefix]` = `p(x_{≤a}, y_{≤b})`.
    fn marginals(&self) -> Vec<Vec<Vec<f64>>> {
        let (j, i, v) = (self.src_len, self.tgt_len, self.alphabet);
        let mut t: Vec<Vec<Vec<f64>>> = (0..=j)
            .map(|a| (0..=i).map(|b| vec![0.0; v.pow((a + b) as u32)]).collect())
            .collect();
        for (idx, &p) in self.probs.iter().enumerate() {
            let d = self.digits(idx);
            for a in 0..=j {
                for b in 0..=i {
                    t[a][b][self.prefix_index(&d, a, b)] += p;
                }
            }
        }
        t
    }
}

/// Maximum deviation of each identity over all `(x, y)` with positive mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecompositionError {
    /// `Π p(y_i | y_<i, x)` against `p(x, y) / p(x)`.
    pub full: f64,
    /// `Π p(y_i | y_<i, x_≤g(i))` against the telescoped segment form.
    pub simultaneous: f64,
}

impl DecompositionError {
    pub fn max(&self) -> f64 {
        self.full.max(self.simultaneous)
    }
}

pub fn decomposition_check(joint: &Joint, g: &[usize]) -> Result<DecompositionError, DiagnosticsError> {
    let (j, n) = (joint.src_len, joint.tgt_len);
    if g.len() != n {
        return Err(DiagnosticsError::BadSchedule(format!(
            "{} steps for target length {n}",
            g.len()
        )));
    }
    if g.iter().any(|&w| w == 0 || w > j) || g.windows(2).any(|w| w[1] < w[0]) {
        return Err(DiagnosticsError::BadSchedule(format!(
            "{g:?} is not monotone within 1..={j}"
        )));
    }
    let m = joint.marginals();
    let mut err = DecompositionError {
        full: 0.0,
        simultaneous: 0.0,
    };
    for (idx, &p) in joint.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let d = joint.digits(idx);
        let at = |a: usize, b: usize| m[a][b][joint.prefix_index(&d, a, b)];

        let full_lhs: f64 = (1..=n).map(|i| at(j, i) / at(j, i - 1)).product();
        let full_rhs = p / at(j, 0);
        err.full = err.full.max((full_lhs - full_rhs).abs());

        let sim_lhs: f64 = (1..=n).map(|i| at(g[i - 1], i) / at(g[i - 1], i - 1)).product();
        let mut denom = at(g[0], 0);
        for i in 2..=n {
            denom *= at(g[i - 1], i - 1) / at(g[i - 2], i - 1);
        }
        let sim_rhs = at(g[n - 1], n) / denom;
        err.simultaneous = err.simultaneous.max((sim_lhs - sim_rhs).abs());
    }
    Ok(err)
}

/// Every non-decreasing schedule of length `tgt_len` over `1..=src_len`.
pub fn all_schedules(src_len: usize, tgt_len: usize) -> Vec<Vec<usize>> {
    fn rec(lo: usize, hi: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for v in lo..=hi {
            cur.push(v);
            rec(v, hi, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, src_len, tgt_len, &mut Vec::new(), &mut out);
    out
}
