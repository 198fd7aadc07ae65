//! Read/write schedules. `g[i]` (stored 0-based in `i`, 1-based in meaning)
//! is the number of source tokens read before target token `i + 1` is
//! written.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy parameter: {0}")]
    Parameter(String),
    #[error("step {step} outside schedule of length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("writing-probability matrix line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schedule covers {expected} source tokens but the source has {actual}")]
    SourceLength { expected: usize, actual: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Full,
    WaitK,
    FromBeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySchedule {
    pub g: Vec<usize>,
    pub kind: PolicyKind,
    pub k: Option<usize>,
    /// Set when a running-maximum repair changed at least one entry.
    pub repaired: bool,
}

impl PolicySchedule {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn is_valid_for(&self, src_len: usize) -> bool {
        self.g.windows(2).all(|w| w[0] <= w[1]) && self.g.iter().all(|&x| (1..=src_len).contains(&x))
    }
}

/// `g[i] = min(k + i - 1, src_len)` for `i = 1..=tgt_len`.
pub fn wait_k_schedule(k: usize, src_len: usize, tgt_len: usize) -> Result<PolicySchedule, PolicyError> {
    if k < 1 {
        return Err(PolicyError::Parameter("k must be at least 1".into()));
    }
    if src_len < 1 || tgt_len < 1 {
        return Err(PolicyError::Parameter("lengths must be at least 1".into()));
    }
    Ok(PolicySchedule {
        g: (1..=tgt_len).map(|i| (k + i - 1).min(src_len)).collect(),
        kind: PolicyKind::WaitK,
        k: Some(k),
        repaired: false,
    })
}

/// `g ≡ src_len`.
pub fn full_schedule(src_len: usize, tgt_len: usize) -> Result<PolicySchedule, PolicyError> {
    if src_len < 1 || tgt_len < 1 {
        return Err(PolicyError::Parameter("lengths must be at least 1".into()));
    }
    Ok(PolicySchedule {
        g: vec![src_len; tgt_len],
        kind: PolicyKind::Full,
        k: None,
        repaired: false,
    })
}

/// `I x J` matrix of writing probabilities with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WritingProbMatrix {
    rows: Vec<Vec<f64>>,
}

impl WritingProbMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(PolicyError::Parameter("empty writing-probability matrix".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(PolicyError::Parameter(format!(
                    "row {} has {} entries, expected {cols}",
                    i + 1,
                    r.len()
                )));
            }
            if let Some(x) = r.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(PolicyError::Parameter(format!(
                    "row {} entry {x} outside [0, 1]",
                    i + 1
                )));
            }
        }
        Ok(Self { rows })
    }

    /// One row per line, whitespace-separated decimals; blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PolicyError::Parse {
                    line: n + 1,
                    reason: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn tgt_len(&self) -> usize {
        self.rows.len()
    }

    pub fn src_len(&self) -> usize {
        self.rows[0].len()
    }
}

/// Per-row argmax (1-based, ties toward the smallest column), then a
/// running maximum so the schedule never decreases.
pub fn schedule_from_writing_probs(beta: &WritingProbMatrix) -> Result<PolicySchedule, PolicyError> {
    let mut g = Vec::with_capacity(beta.tgt_len());
    let mut repaired = false;
    let mut running = 0;
    for row in beta.rows() {
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        let raw = best + 1;
        if raw < running {
            repaired = true;
        }
        running = running.max(raw);
        g.push(running);
    }
    Ok(PolicySchedule {
        g,
        kind: PolicyKind::FromBeta,
        k: None,
        repaired,
    })
}

/// Number of source tokens visible to target step `i` (1-based).
pub fn cross_attention_context(schedule: &PolicySchedule, i: usize) -> Result<usize, PolicyError> {
    if i == 0 || i > schedule.g.len() {
        return Err(PolicyError::StepOutOfRange {
            step: i,
            len: schedule.g.len(),
        });
    }
    Ok(schedule.g[i - 1])
}

/// A read policy usable while the hypothesis length is still unknown.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Full,
    WaitK(usize),
    /// Precomputed schedule; steps past its end keep its final value.
    Fixed(PolicySchedule),
}

impl Policy {
    pub fn from_beta(beta: &WritingProbMatrix) -> Result<Self, PolicyError> {
        Ok(Self::Fixed(schedule_from_writing_probs(beta)?))
    }

    pub fn check(&self, src_len: usize) -> Result<(), PolicyError> {
        if src_len == 0 {
            return Err(PolicyError::Parameter("empty source".into()));
        }
        match self {
            Self::WaitK(0) => Err(PolicyError::Parameter("k must be at least 1".into())),
            Self::Fixed(s) if s.kind == PolicyKind::FromBeta && s.g.iter().any(|&x| x > src_len) => {
                Err(PolicyError::SourceLength {
                    expected: *s.g.iter().max().unwrap(),
                    actual: src_len,
                })
            }
            Self::Fixed(s) if s.is_empty() || !s.is_valid_for(src_len) => Err(PolicyError::Parameter(
                "fixed schedule is not monotone within the source length".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `g(i)` for 1-based step `i`.
    pub fn g(&self, i: usize, src_len: usize) -> usize {
        match self {
            Self::Full => src_len,
            Self::WaitK(k) => (k + i - 1).min(src_len),
            Self::Fixed(s) => s.g[(i - 1).min(s.g.len() - 1)].min(src_len),
        }
    }

    pub fn schedule(&self, src_len: usize, tgt_len: usize) -> Result<PolicySchedule, PolicyError> {
        self.check(src_len)?;
        match self {
            Self::Full => full_schedule(src_len, tgt_len),
            Self::WaitK(k) => wait_k_schedule(*k, src_len, tgt_len),
            Self::Fixed(s) => Ok(PolicySchedule {
                g: (1..=tgt_len).map(|i| self.g(i, src_len)).collect(),
                ..s.clone()
            }),
        }
    }
}
