//! Training over the four regimes (full sentence, wait-k prefix-to-prefix,
//! wait-k with length-aware fill, predicted-length fill), Adam with an
//! inverse square-root schedule, evaluation and bit-exact checkpoints.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{Graph, SeededRng, TensorError};
use crate::data::{Batch, DataError, TokenizedPair, Vocabulary};
use crate::diagnostics::{self, DiagnosticsError, MetricsReport, ReportSelection};
use crate::laf::{laf_losses, ContextMode, LafError, LengthSource};
use crate::policy::{wait_k_schedule, Policy, PolicyError, PolicySchedule};
use crate::stream_decode::{session_latency, simulate, trace_records, DecodeMode, StreamError, TraceRecord};
use crate::transformer::{Forward, ModelConfig, ModelError, Seq2Seq};

const MAGIC: &[u8; 4] = b"SLAF";
pub const CHECKPOINT_VERSION: u32 = 1;
const DROPOUT_TAG: u64 = 0xD80F_0000_0000_0000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at step {step}")]
    Divergence { step: u64, last_good: Box<Checkpoint> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Laf(#[from] LafError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Every step sees the whole source.
    Full,
    /// Prefix-to-prefix under wait-k.
    WaitK,
    /// Wait-k with the pseudo full-sentence filled to the true length.
    WaitKLaf,
    /// Wait-k with the pseudo full-sentence filled to the predicted length.
    PredLaf,
}

impl TrainMode {
    pub const NAMES: [&'static str; 4] = ["full", "wait-k", "wait-k-laf", "pred-laf"];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WaitK => "wait-k",
            Self::WaitKLaf => "wait-k-laf",
            Self::PredLaf => "pred-laf",
        }
    }

    pub fn context(self) -> ContextMode {
        match self {
            Self::Full => ContextMode::Full,
            Self::WaitK => ContextMode::Prefix,
            Self::WaitKLaf => ContextMode::Laf(LengthSource::GroundTruth),
            Self::PredLaf => ContextMode::Laf(LengthSource::Predicted),
        }
    }

    pub fn needs_k(self) -> bool {
        self != Self::Full
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "wait-k" => Ok(Self::WaitK),
            "wait-k-laf" => Ok(Self::WaitKLaf),
            "pred-laf" => Ok(Self::PredLaf),
            other => Err(TrainError::Config(format!(
                "unknown mode {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Required by every mode except `full`.
    pub k: Option<usize>,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to the translation loss only.
    pub smoothing: f64,
    pub max_steps: u64,
    /// Validation every this many steps; 0 disables it.
    pub eval_every: u64,
    /// Validation uses at most this many sentences.
    pub val_sentences: usize,
    pub seed: u64,
    /// Upper bound on `batch_len · longest_sequence`.
    pub token_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Full,
            k: None,
            lr: 5e-4,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            smoothing: 0.1,
            max_steps: 20_000,
            eval_every: 1000,
            val_sentences: 200,
            seed: 1,
            token_budget: 2048,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "mode",
        "k",
        "lr",
        "warmup",
        "beta1",
        "beta2",
        "eps",
        "smoothing",
        "max_steps",
        "eval_every",
        "val_sentences",
        "seed",
        "token_budget",
    ];

    /// Sets one key; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "mode" => self.mode = value.parse()?,
            "k" => {
                self.k = match value {
                    "" | "none" => None,
                    v => Some(p(key, v)?),
                }
            }
            "lr" => self.lr = p(key, value)?,
            "warmup" => self.warmup = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "smoothing" => self.smoothing = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "val_sentences" => self.val_sentences = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "token_budget" => self.token_budget = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "mode = {}\nk = {}\nlr = {}\nwarmup = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nsmoothing = {}\n\
             max_steps = {}\neval_every = {}\nval_sentences = {}\nseed = {}\ntoken_budget = {}\n",
            self.mode,
            self.k.map_or_else(|| "none".to_string(), |k| k.to_string()),
            self.lr,
            self.warmup,
            self.beta1,
            self.beta2,
            self.eps,
            self.smoothing,
            self.max_steps,
            self.eval_every,
            self.val_sentences,
            self.seed,
            self.token_budget
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("malformed line {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(TrainError::Config(format!("unknown training key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        match (self.mode.needs_k(), self.k) {
            (true, None) => return fail(format!("mode {} requires k", self.mode)),
            (_, Some(0)) => return fail("k must be at least 1".into()),
            _ => {}
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if self.token_budget == 0 {
            return fail("token_budget must be positive".into());
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then `lr · sqrt(warmup / step)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }

    /// Read schedules for the pairs of a batch.
    pub fn schedules(&self, pairs: &[TokenizedPair], indices: &[usize]) -> Result<Vec<PolicySchedule>, TrainError> {
        match (self.mode, self.k) {
            (TrainMode::Full, _) => Ok(Vec::new()),
            (_, Some(k)) => Ok(indices
                .iter()
                .map(|&i| wait_k_schedule(k, pairs[i].src_len(), pairs[i].tgt_steps()))
                .collect::<Result<_, _>>()?),
            (mode, None) => Err(TrainError::Config(format!("mode {mode} requires k"))),
        }
    }

    /// Policy and decoding mode used for validation.
    pub fn eval_setup(&self) -> (Policy, DecodeMode) {
        match (self.mode, self.k) {
            (TrainMode::Full, _) | (_, None) => (Policy::Full, DecodeMode::Plain),
            (TrainMode::WaitK, Some(k)) => (Policy::WaitK(k), DecodeMode::Plain),
            (_, Some(k)) => (Policy::WaitK(k), DecodeMode::Laf(LengthSource::Predicted)),
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &Seq2Seq<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(
        &mut self,
        model: &mut Seq2Seq<f32>,
        grads: &[crate::autodiff::Tensor<f32>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let step = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            for (((x, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = f64::from(gi);
                let nm = b1 * f64::from(*mi) + (1.0 - b1) * gi;
                let nv = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
                *mi = nm as f32;
                *vi = nv as f32;
                *x = (f64::from(*x) - step * nm / (nv.sqrt() + cfg.eps)) as f32;
            }
        }
    }
}

/// Self-contained training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Parameter values in declaration order.
    pub params: Vec<Vec<f32>>,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Next batch within the epoch.
    pub cursor: u64,
    /// Root of every derived random stream.
    pub seed: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        if self.buf.len() < n {
            return Err(TrainError::Checkpoint("truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("invalid UTF-8".into()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<Vec<f32>>, TrainError> {
        (0..count)
            .map(|_| {
                let n = self.u64()? as usize;
                let bytes = self.take(
                    n.checked_mul(4)
                        .ok_or_else(|| TrainError::Checkpoint("size overflow".into()))?,
                )?;
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect())
            })
            .collect()
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, blobs: &[Vec<f32>]) {
    for b in blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for x in b {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

impl Checkpoint {
    /// Layout: `SLAF`, u32 version, then length-prefixed UTF-8 model config,
    /// training config, source and target vocabularies; u64 step, epoch,
    /// cursor, seed, Adam step; u32 parameter count; per parameter a u64
    /// length and little-endian f32 values, then the first and second Adam
    /// moments in the same layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &self.model_config.to_kv());
        put_text(&mut out, &self.train_config.to_kv());
        put_text(&mut out, &self.src_vocab.to_text());
        put_text(&mut out, &self.tgt_vocab.to_text());
        for x in [self.step, self.epoch, self.cursor, self.seed, self.adam.t] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        put_floats(&mut out, &self.params);
        put_floats(&mut out, &self.adam.m);
        put_floats(&mut out, &self.adam.v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let model_config = ModelConfig::from_kv(&r.text()?)?;
        let train_config = TrainConfig::from_kv(&r.text()?)?;
        let src_vocab = Vocabulary::from_text(&r.text()?)?;
        let tgt_vocab = Vocabulary::from_text(&r.text()?)?;
        let (step, epoch, cursor, seed, t) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let n = r.u32()? as usize;
        let params = r.floats(n)?;
        let m = r.floats(n)?;
        let v = r.floats(n)?;
        if !r.buf.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", r.buf.len())));
        }
        let ck = Self {
            model_config,
            train_config,
            src_vocab,
            tgt_vocab,
            params,
            adam: Adam { m, v, t },
            step,
            epoch,
            cursor,
            seed,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model; sizes must match the configured layout.
    pub fn model(&self) -> Result<Seq2Seq<f32>, TrainError> {
        let mut model = Seq2Seq::<f32>::new(self.model_config.clone(), self.seed)?;
        if model.params.len() != self.params.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} parameters, layout declares {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (i, (p, src)) in model.params.iter_mut().zip(&self.params).enumerate() {
            let (m, v) = (&self.adam.m[i], &self.adam.v[i]);
            if p.value.numel() != src.len() || m.len() != src.len() || v.len() != src.len() {
                return Err(TrainError::Checkpoint(format!("size mismatch in parameter {}", p.name)));
            }
            p.value.data_mut().copy_from_slice(src);
        }
        Ok(model)
    }

    pub fn check_vocab(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<(), TrainError> {
        if &self.src_vocab != src {
            return Err(TrainError::VocabMismatch(
                "source vocabulary differs from checkpoint".into(),
            ));
        }
        if &self.tgt_vocab != tgt {
            return Err(TrainError::VocabMismatch(
                "target vocabulary differs from checkpoint".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log. Losses are per target token.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub ce: f64,
    pub len: f64,
    pub total: f64,
    pub lr: f64,
    pub val_bleu: Option<f64>,
    pub val_al: Option<f64>,
    /// Validation length accuracy when validating, else the batch's
    /// classifier accuracy in length-aware modes.
    pub len_acc: Option<f64>,
}

pub fn write_log_header<W: Write>(mut w: W) -> io::Result<()> {
    writeln!(w, "step,ce,len,total,lr,val_bleu,val_al,len_acc")
}

pub fn write_log_row<W: Write>(mut w: W, r: &LogRow) -> io::Result<()> {
    let o = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    writeln!(
        w,
        "{},{},{},{},{},{},{},{}",
        r.step,
        r.ce,
        r.len,
        r.total,
        r.lr,
        o(r.val_bleu),
        o(r.val_al),
        o(r.len_acc)
    )
}

/// Mutable training state over a fixed training set.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Seq2Seq<f32>,
    pub adam: Adam,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub step: u64,
    epoch: u64,
    cursor: usize,
    batches: Vec<Vec<usize>>,
    pairs: &'a [TokenizedPair],
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        pairs: &'a [TokenizedPair],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(DataError::EmptyCorpus.into());
        }
        if model_cfg.src_vocab != src_vocab.len() || model_cfg.tgt_vocab != tgt_vocab.len() {
            return Err(TrainError::VocabMismatch(format!(
                "model expects {}/{} tokens, vocabularies hold {}/{}",
                model_cfg.src_vocab,
                model_cfg.tgt_vocab,
                src_vocab.len(),
                tgt_vocab.len()
            )));
        }
        let model = Seq2Seq::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(&model);
        let batches = crate::data::batch_indices(pairs, cfg.token_budget, cfg.seed, 0);
        Ok(Self {
            cfg,
            model,
            adam,
            src_vocab,
            tgt_vocab,
            step: 0,
            epoch: 0,
            cursor: 0,
            batches,
            pairs,
        })
    }

    pub fn resume(ck: &Checkpoint, pairs: &'a [TokenizedPair]) -> Result<Self, TrainError> {
        let model = ck.model()?;
        let batches = crate::data::batch_indices(pairs, ck.train_config.token_budget, ck.seed, ck.epoch);
        if ck.cursor as usize > batches.len() {
            return Err(TrainError::Checkpoint("batch cursor past end of epoch".into()));
        }
        Ok(Self {
            cfg: ck.train_config.clone(),
            model,
            adam: ck.adam.clone(),
            src_vocab: ck.src_vocab.clone(),
            tgt_vocab: ck.tgt_vocab.clone(),
            step: ck.step,
            epoch: ck.epoch,
            cursor: ck.cursor as usize,
            batches,
            pairs,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.cfg().clone(),
            train_config: self.cfg.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            params: self.model.params.iter().map(|p| p.value.data().to_vec()).collect(),
            adam: self.adam.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor as u64,
            seed: self.cfg.seed,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.batches = crate::data::batch_indices(self.pairs, self.cfg.token_budget, self.cfg.seed, self.epoch);
        }
        self.cursor += 1;
        self.batches[self.cursor - 1].clone()
    }

    /// One optimizer step on the next batch. On a non-finite loss or
    /// gradient the state is left untouched.
    pub fn train_step(&mut self) -> Result<LogRow, TrainError> {
        let (epoch, cursor) = (self.epoch, self.cursor);
        let indices = self.next_batch();
        let batch = Batch::new(self.pairs, &indices)?;
        let schedules = self.cfg.schedules(self.pairs, &indices)?;
        let step = self.step + 1;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&self.model.params);
        let mut rng = SeededRng::derive(self.cfg.seed, DROPOUT_TAG ^ step);
        let mut fx = Forward::train(&mut g, &p, self.model.cfg().dropout, &mut rng);
        let out = laf_losses(
            &self.model.arch,
            &mut fx,
            &batch,
            &schedules,
            self.cfg.mode.context(),
            self.cfg.smoothing,
        )?;
        let per_token = 1.0 / out.n_tokens.max(1) as f64;
        let objective = g.scale(out.total, per_token as f32)?;
        let loss = g.value(objective).data()[0];
        let grads = if loss.is_finite() {
            Some(g.backward(objective)?)
        } else {
            None
        };
        let grads = match grads {
            Some(gr) if gr.params().iter().all(|t| t.is_finite()) => gr,
            _ => {
                if self.epoch != epoch {
                    self.batches = crate::data::batch_indices(self.pairs, self.cfg.token_budget, self.cfg.seed, epoch);
                }
                self.epoch = epoch;
                self.cursor = cursor;
                return Err(TrainError::Divergence {
                    step,
                    last_good: Box::new(self.checkpoint()),
                });
            }
        };
        let lr = self.cfg.lr_at(step);
        self.adam.update(&mut self.model, grads.params(), lr, &self.cfg);
        self.step = step;
        Ok(LogRow {
            step,
            ce: out.breakdown.ce * per_token,
            len: out.breakdown.len * per_token,
            total: out.breakdown.total * per_token,
            lr,
            val_bleu: None,
            val_al: None,
            len_acc: (out.len_steps > 0).then(|| out.len_correct as f64 / out.len_steps as f64),
        })
    }

    /// Runs to `cfg.max_steps`, validating every `cfg.eval_every` steps.
    /// Returns the best validated checkpoint, or the final one when
    /// validation is off.
    pub fn run(
        &mut self,
        valid: &[TokenizedPair],
        mut on_row: impl FnMut(&LogRow) -> io::Result<()>,
    ) -> Result<TrainOutcome, TrainError> {
        let mut best: Option<(f64, Checkpoint)> = None;
        let mut rows = Vec::new();
        while self.step < self.cfg.max_steps {
            let mut row = self.train_step()?;
            let validate = self.cfg.eval_every > 0
                && !valid.is_empty()
                && (self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.max_steps);
            if validate {
                let (policy, mode) = self.cfg.eval_setup();
                let n = valid.len().min(self.cfg.val_sentences.max(1));
                let ev = evaluate(&self.model, &self.tgt_vocab, &valid[..n], &policy, mode, "valid")?;
                row.val_bleu = ev.report.bleu;
                row.val_al = ev.report.al;
                if ev.report.length_accuracy.is_some() {
                    row.len_acc = ev.report.length_accuracy;
                }
                let bleu = ev.report.bleu.unwrap_or(0.0);
                if best.as_ref().is_none_or(|(b, _)| bleu > *b) {
                    best = Some((bleu, self.checkpoint()));
                }
            }
            on_row(&row)?;
            rows.push(row);
        }
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best: best.map_or_else(|| last.clone(), |(_, c)| c),
            last,
            log: rows,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Streams every pair through the model under `policy`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<TraceRecord>,
    pub hypotheses: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    /// Per-sentence average lagging.
    pub al: Vec<f64>,
}

pub fn evaluate(
    model: &Seq2Seq<f32>,
    tgt_vocab: &Vocabulary,
    pairs: &[TokenizedPair],
    policy: &Policy,
    mode: DecodeMode,
    system: &str,
) -> Result<Evaluation, TrainError> {
    if tgt_vocab.len() != model.cfg().tgt_vocab {
        return Err(TrainError::VocabMismatch(format!(
            "target vocabulary holds {} tokens, model expects {}",
            tgt_vocab.len(),
            model.cfg().tgt_vocab
        )));
    }
    let mut records = Vec::new();
    let mut hypotheses = Vec::with_capacity(pairs.len());
    let mut references = Vec::with_capacity(pairs.len());
    let mut al = Vec::with_capacity(pairs.len());
    for (sent, pair) in pairs.iter().enumerate() {
        if let Some(&bad) = pair.src.iter().find(|&&t| t >= model.cfg().src_vocab) {
            return Err(TrainError::VocabMismatch(format!(
                "source id {bad} outside the model vocabulary"
            )));
        }
        let (hyp, session) = simulate(model, policy, &pair.src, mode, None)?;
        al.push(session_latency(&session)?.al);
        records.extend(trace_records(&session, system, sent, mode, Some(tgt_vocab)));
        hypotheses.push(tgt_vocab.decode(&hyp));
        references.push(tgt_vocab.decode(pair.tgt_words()));
    }
    let grouped = diagnostics::group_traces(&records)?;
    let mut report = match grouped.first() {
        Some(t) => diagnostics::metrics_report(t, Some(&references), ReportSelection::ALL)?,
        None => MetricsReport {
            system: system.to_string(),
            ..Default::default()
        },
    };
    if !al.is_empty() {
        report.al = Some(al.iter().sum::<f64>() / al.len() as f64);
    }
    Ok(Evaluation {
        report,
        records,
        hypotheses,
        references,
        al,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_task, Corpus, SynthKind};

    fn tiny_model_cfg(corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 32,
            max_positions: 16,
            src_vocab: corpus.src_vocab.len(),
            tgt_vocab: corpus.tgt_vocab.len(),
            dropout: 0.1,
            unidirectional_encoder: true,
            length_classes: 16,
        }
    }

    fn corpus(kind: SynthKind, n: usize) -> Corpus {
        let text = synth_task(kind, 8, 3, 6, n, 3).unwrap();
        Corpus::build(&text, 1, 16).unwrap()
    }

    fn cfg(mode: TrainMode, k: Option<usize>) -> TrainConfig {
        TrainConfig {
            mode,
            k,
            lr: 3e-3,
            warmup: 20,
            max_steps: 12,
            eval_every: 0,
            token_budget: 64,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = cfg(TrainMode::WaitKLaf, Some(3));
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(cfg(TrainMode::WaitK, None).validate().is_err());
        assert!(cfg(TrainMode::Full, None).validate().is_ok());
        assert!(TrainConfig::from_kv("bogus = 1").is_err());
        assert!("wait-k-laf".parse::<TrainMode>().is_ok());
        assert!("sideways".parse::<TrainMode>().is_err());
    }

    #[test]
    fn inverse_sqrt_schedule() {
        let c = TrainConfig {
            lr: 1e-3,
            warmup: 100,
            ..Default::default()
        };
        assert!((c.lr_at(50) - 5e-4).abs() < 1e-15);
        assert!((c.lr_at(100) - 1e-3).abs() < 1e-15);
        assert!((c.lr_at(400) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let c = corpus(SynthKind::Copy, 40);
        let run = || {
            let mut t = Trainer::new(
                cfg(TrainMode::WaitKLaf, Some(2)),
                tiny_model_cfg(&c),
                c.src_vocab.clone(),
                c.tgt_vocab.clone(),
                &c.pairs,
            )
            .unwrap();
            let out = t.run(&[], |_| Ok(())).unwrap();
            (out.log, out.last.to_bytes())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(a.iter().all(|r| r.len > 0.0 && r.total > r.ce));
    }

    #[test]
    fn resume_is_bit_exact() {
        let c = corpus(SynthKind::Reverse, 40);
        let mk = || {
            Trainer::new(
                cfg(TrainMode::PredLaf, Some(2)),
                tiny_model_cfg(&c),
                c.src_vocab.clone(),
                c.tgt_vocab.clone(),
                &c.pairs,
            )
            .unwrap()
        };
        let mut straight = mk();
        let full_log = straight.run(&[], |_| Ok(())).unwrap().log;

        let mut first = mk();
        for _ in 0..5 {
            first.train_step().unwrap();
        }
        let bytes = first.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let mut resumed = Trainer::resume(&ck, &c.pairs).unwrap();
        let rest = resumed.run(&[], |_| Ok(())).unwrap();
        assert_eq!(rest.log.as_slice(), &full_log[5..]);
        assert_eq!(rest.last.to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn wait_k_beyond_source_matches_full() {
        let c = corpus(SynthKind::Copy, 30);
        let run = |mode, k| {
            let mut t = Trainer::new(
                cfg(mode, k),
                tiny_model_cfg(&c),
                c.src_vocab.clone(),
                c.tgt_vocab.clone(),
                &c.pairs,
            )
            .unwrap();
            t.run(&[], |_| Ok(())).unwrap().log
        };
        assert_eq!(run(TrainMode::Full, None), run(TrainMode::WaitK, Some(50)));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let c = corpus(SynthKind::Copy, 10);
        let t = Trainer::new(
            cfg(TrainMode::Full, None),
            tiny_model_cfg(&c),
            c.src_vocab.clone(),
            c.tgt_vocab.clone(),
            &c.pairs,
        )
        .unwrap();
        let bytes = t.checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn evaluate_reports_wait_k_latency() {
        let c = corpus(SynthKind::Copy, 12);
        let model = Seq2Seq::<f32>::new(tiny_model_cfg(&c), 1).unwrap();
        let ev = evaluate(
            &model,
            &c.tgt_vocab,
            &c.pairs,
            &Policy::WaitK(2),
            DecodeMode::Laf(LengthSource::Predicted),
            "s",
        )
        .unwrap();
        assert_eq!(ev.hypotheses.len(), 12);
        assert!(ev.report.al.is_some() && ev.report.bleu.is_some());
        assert!(ev.report.length_accuracy.is_some());
        let other = Vocabulary::build(&[vec!["x".to_string()]], 1).unwrap();
        assert!(matches!(
            evaluate(&model, &other, &c.pairs, &Policy::Full, DecodeMode::Plain, "s"),
            Err(TrainError::VocabMismatch(_))
        ));
    }
}
