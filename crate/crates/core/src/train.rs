//! Training paths: teacher pretraining, PTP distillation with selectable
//! losses and proposal distributions, and inverse autoregressive training
//! (no teacher).
//!
//! Distillation reverse-engineers, for every training token, the interval of
//! auxiliary values under which the teacher would have sampled it, draws a
//! compatible value, and trains the student to reproduce the token (or the
//! teacher's full row) given those auxiliaries. Inverse autoregressive
//! training does the same against the model's own current conditionals, so
//! no teacher is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{PtpError, Result};
use crate::model::{NetSpec, PosInput, PtpModel, PtpVariant, TransformerLm};
use crate::nn::{Adam, ArchConfig, Mat};
use crate::sampling::{sample_in_interval, AuxInterval, AuxStream, Categorical, PROB_FLOOR};
use crate::teacher::{sequential_sample, ArModel};
use crate::Token;

/// Distillation loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against the observed token.
    Ce,
    /// Independent per-class binary cross-entropy against the target row
    /// (the observed one-hot for one-hot models, the teacher row otherwise).
    Bce,
    /// Forward KL `d(teacher, student)`; requires cached teacher rows.
    Kl,
    /// Reverse KL `d(student, teacher)`; requires cached teacher rows.
    KlRev,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "bce" => Ok(Self::Bce),
            "kl" => Ok(Self::Kl),
            "kl_rev" | "kl-rev" => Ok(Self::KlRev),
            other => Err(PtpError::InvalidConfig(format!(
                "unknown loss {other:?} (expected ce, bce, kl, kl_rev)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Bce => "bce",
            Self::Kl => "kl",
            Self::KlRev => "kl_rev",
        }
    }
}

/// Where training sequences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    /// Roll sequences out of the teacher once, cache them with their
    /// intervals, and re-draw auxiliary values inside the cached intervals
    /// on every use.
    Teacher,
    /// Sample windows from the student's current parameters, then re-label
    /// with the teacher.
    Student,
    /// Draw sequences from a fixed corpus.
    Dataset,
}

impl ProposalKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            "dataset" => Ok(Self::Dataset),
            other => Err(PtpError::InvalidConfig(format!(
                "unknown proposal {other:?} (expected teacher, student, dataset)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::Dataset => "dataset",
        }
    }
}

/// How the context/prediction split index is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Always split at the start: empty context, full-window prediction.
    Start,
    /// Uniform over positions that leave a full window of prediction tokens.
    Uniform,
}

/// A training item: a sequence, its split index, compatible auxiliaries for
/// every prediction position, and the (floored, shaped) teacher rows and
/// intervals they were drawn from.
#[derive(Debug, Clone)]
pub struct DistillExample {
    pub tokens: Vec<Token>,
    /// Number of context tokens; predictions are `tokens[split..]`.
    pub split: usize,
    /// One auxiliary per prediction position.
    pub aux: AuxStream,
    /// Cached teacher row per prediction position.
    pub teacher_dists: Vec<Categorical>,
    /// Compatible interval per prediction position.
    pub intervals: Vec<AuxInterval>,
}

impl DistillExample {
    pub fn window(&self) -> usize {
        self.tokens.len() - self.split
    }

    pub fn context(&self) -> &[Token] {
        &self.tokens[..self.split]
    }

    pub fn targets(&self) -> &[Token] {
        &self.tokens[self.split..]
    }

    /// Construction invariant: every auxiliary lies in its interval and
    /// picks its token back out of the cached teacher row.
    pub fn check_invariant(&self) -> Result<()> {
        for (k, target) in self.targets().iter().enumerate() {
            let u = self.aux[k].as_f64();
            if !self.intervals[k].contains(u) {
                return Err(PtpError::InvalidInput(format!(
                    "aux {u} outside interval at position {}",
                    self.split + k
                )));
            }
            if self.teacher_dists[k].pick(u) != *target {
                return Err(PtpError::InvalidInput(format!(
                    "aux {u} does not reproduce token {target} at position {}",
                    self.split + k
                )));
            }
        }
        Ok(())
    }

    /// Re-draws every auxiliary inside its cached interval.
    pub fn redraw_aux<R: Rng + ?Sized>(&mut self, b: f64, rng: &mut R) -> Result<()> {
        let mut values = Vec::with_capacity(self.intervals.len());
        for iv in &self.intervals {
            values.push(sample_in_interval(*iv, b, rng)?);
        }
        self.aux = AuxStream::new(values);
        Ok(())
    }

    /// Narrows the example to `window` prediction tokens starting at `split`
    /// context tokens (both counted in positions of `self.tokens`).
    pub fn slice(&self, split: usize, window: usize) -> DistillExample {
        assert!(split >= self.split, "cannot widen the extracted range");
        let off = split - self.split;
        DistillExample {
            tokens: self.tokens[..split + window].to_vec(),
            split,
            aux: AuxStream::new(self.aux.values()[off..off + window].to_vec()),
            teacher_dists: self.teacher_dists[off..off + window].to_vec(),
            intervals: self.intervals[off..off + window].to_vec(),
        }
    }
}

/// Reverse-engineers the auxiliary variables under which `teacher` would
/// have produced `tokens[split..]`, in one batched teacher evaluation.
///
/// Teacher rows are floored at [`PROB_FLOOR`] before the CDF is built so an
/// observed token with tiny-but-nonzero probability still has a nonempty
/// interval; a token the teacher gives (effectively) zero mass yields
/// [`PtpError::UnextractableToken`].
pub fn extract_auxiliaries<R: Rng + ?Sized>(
    teacher: &dyn ArModel,
    tokens: &[Token],
    split: usize,
    b: f64,
    rng: &mut R,
) -> Result<DistillExample> {
    if split >= tokens.len() {
        return Err(PtpError::InvalidInput(format!(
            "split {split} leaves no prediction tokens in a sequence of length {}",
            tokens.len()
        )));
    }
    let raw = teacher.batch_dists(&tokens[..split], &tokens[split..])?;
    let mut dists = Vec::with_capacity(raw.len());
    let mut intervals = Vec::with_capacity(raw.len());
    let mut values = Vec::with_capacity(raw.len());
    for (k, dist) in raw.iter().enumerate() {
        let position = split + k;
        let token = tokens[position];
        let floored = Categorical::from_probs_floored(dist.probs(), PROB_FLOOR)?;
        let interval = floored
            .compatible_interval(token)
            .map_err(|_| PtpError::UnextractableToken { token, position })?;
        let u = match sample_in_interval(interval, b, rng) {
            Ok(u) => u,
            Err(PtpError::UnrepresentableInterval { .. }) => {
                return Err(PtpError::UnextractableToken { token, position })
            }
            Err(e) => return Err(e),
        };
        debug_assert_eq!(floored.pick(u.as_f64()), token);
        dists.push(floored);
        intervals.push(interval);
        values.push(u);
    }
    let example = DistillExample {
        tokens: tokens.to_vec(),
        split,
        aux: AuxStream::new(values),
        teacher_dists: dists,
        intervals,
    };
    example.check_invariant()?;
    Ok(example)
}

/// Target row for one prediction slot.
enum SlotTarget<'a> {
    Hard(Token),
    Soft(&'a Categorical),
}

/// Loss value and gradient with respect to the logit row.
fn slot_loss(logits: &[f64], target: &SlotTarget, loss: LossKind) -> (f64, Vec<f64>) {
    let v = logits.len();
    match loss {
        LossKind::Bce => {
            // Stable binary cross-entropy with logits, per class.
            let q = |j: usize| match target {
                SlotTarget::Hard(t) => {
                    if j == *t {
                        1.0
                    } else {
                        0.0
                    }
                }
                SlotTarget::Soft(row) => row.prob(j),
            };
            let mut total = 0.0;
            let mut grad = vec![0.0; v];
            for (j, &z) in logits.iter().enumerate() {
                let qj = q(j);
                total += z.max(0.0) - z * qj + (-z.abs()).exp().ln_1p();
                grad[j] = 1.0 / (1.0 + (-z).exp()) - qj;
            }
            (total, grad)
        }
        _ => {
            // Softmax-based losses.
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            let logz = zsum.ln() + m;
            let p: Vec<f64> = exps.iter().map(|e| e / zsum).collect();
            match (loss, target) {
                (LossKind::Ce, SlotTarget::Hard(t)) => {
                    let value = logz - logits[*t];
                    let mut grad = p;
                    grad[*t] -= 1.0;
                    (value, grad)
                }
                (LossKind::Ce, SlotTarget::Soft(row)) | (LossKind::Kl, SlotTarget::Soft(row)) => {
                    // KL(q || p) up to the constant entropy of q for ce-soft;
                    // the full divergence for kl. Gradient is identical.
                    let mut value = 0.0;
                    let mut grad = p.clone();
                    for (j, &qj) in row.probs().iter().enumerate() {
                        if qj > 0.0 {
                            value += qj * (qj.ln() - (logits[j] - logz));
                        }
                        grad[j] -= qj;
                    }
                    (value, grad)
                }
                (LossKind::Kl, SlotTarget::Hard(t)) => {
                    // One-hot target: KL collapses to cross-entropy.
                    let value = logz - logits[*t];
                    let mut grad = p;
                    grad[*t] -= 1.0;
                    (value, grad)
                }
                (LossKind::KlRev, SlotTarget::Soft(row)) => {
                    // KL(p || q): requires q > 0 everywhere (rows are floored).
                    let mut value = 0.0;
                    for j in 0..v {
                        let logp = logits[j] - logz;
                        value += p[j] * (logp - row.prob(j).ln());
                    }
                    let mut grad = vec![0.0; v];
                    for j in 0..v {
                        let logp = logits[j] - logz;
                        grad[j] = p[j] * (logp - row.prob(j).ln() - value);
                    }
                    (value, grad)
                }
                (LossKind::KlRev, SlotTarget::Hard(_)) => {
                    unreachable!("kl_rev requires a soft target; rejected earlier")
                }
                _ => unreachable!(),
            }
        }
    }
}

fn slot_target<'a>(
    variant: PtpVariant,
    loss: LossKind,
    example: &'a DistillExample,
    k: usize,
) -> Result<SlotTarget<'a>> {
    let token = example.targets()[k];
    match (variant, loss) {
        (PtpVariant::OneHot, LossKind::Ce) | (PtpVariant::OneHot, LossKind::Bce) => {
            Ok(SlotTarget::Hard(token))
        }
        (_, LossKind::Ce) => Ok(SlotTarget::Hard(token)),
        (_, LossKind::Bce) | (_, LossKind::Kl) | (_, LossKind::KlRev) => {
            if example.teacher_dists.is_empty() {
                return Err(PtpError::InvalidConfig(format!(
                    "loss {} requires cached teacher rows",
                    loss.name()
                )));
            }
            Ok(SlotTarget::Soft(&example.teacher_dists[k]))
        }
    }
}

/// Distillation loss of a student forward pass against one example: the mean
/// over prediction positions of the per-slot loss.
pub fn distill_loss(
    outputs: &crate::model::WindowForward,
    example: &DistillExample,
    loss: LossKind,
) -> Result<f64> {
    if outputs.window() != example.window() {
        return Err(PtpError::InvalidInput(format!(
            "forward window {} vs example window {}",
            outputs.window(),
            example.window()
        )));
    }
    let variant = outputs.variant();
    let mut total = 0.0;
    for k in 0..example.window() {
        let target = slot_target(variant, loss, example, k)?;
        let (value, _) = slot_loss(outputs.slot_logits(k), &target, loss);
        total += value;
    }
    Ok(total / example.window() as f64)
}

/// Loss and full parameter gradient of `student` on one example.
pub fn distill_loss_grads(
    student: &PtpModel,
    example: &DistillExample,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let variant = student.config().variant;
    let window = example.window();
    let inputs = student.window_inputs(example.context(), example.aux.values())?;
    let layout = student.layout();
    let spec = NetSpec {
        arch: &student.config().arch,
        layout: &layout,
        aux_kind: student.aux_kind(),
    };
    let (logits, cache) = spec.forward(&student.params, &inputs)?;
    let ctx_rows = 1 + example.split;
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for k in 0..window {
        let row = match variant {
            PtpVariant::OneHot => ctx_rows + k,
            PtpVariant::Categorical | PtpVariant::Independent => ctx_rows + k - 1,
        };
        let target = slot_target(variant, loss, example, k)?;
        let (value, grad) = slot_loss(logits.row(row), &target, loss);
        total += value;
        for (d, g) in dlogits.row_mut(row).iter_mut().zip(&grad) {
            *d = g / window as f64;
        }
    }
    let mut grads = vec![0.0; layout.total];
    spec.backward(&student.params, &cache, &dlogits, &mut grads);
    Ok((total / window as f64, grads))
}

/// Shared optimizer knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Cosine-decay the learning rate to ~0 across the run. Keeps Adam from
    /// oscillating around the optimum on small tasks.
    pub cosine_decay: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            clip: Some(1.0),
            cosine_decay: true,
            seed: 0,
            log_every: 50,
        }
    }
}

fn step_lr(opts: &TrainOptions, step: usize) -> f64 {
    if opts.cosine_decay {
        let t = step as f64 / opts.steps.max(1) as f64;
        opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()).max(0.02)
    } else {
        opts.lr
    }
}

/// One metrics row; unevaluated columns stay `None`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub eval_mean_correct: Option<f64>,
    pub perplexity: Option<f64>,
}

/// Training trace: logged rows plus extraction bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<MetricRow>,
    /// Examples dropped because a target token was unextractable.
    pub skipped_examples: usize,
}

impl TrainLog {
    fn log(&mut self, step: usize, loss: f64) {
        self.rows.push(MetricRow {
            step,
            loss,
            eval_mean_correct: None,
            perplexity: None,
        });
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(PtpError::Diverged { step, loss });
    }
    Ok(())
}

/// Sums per-example gradients in batch order (kept deterministic regardless
/// of how the parallel map schedules the items).
fn batch_grads<T: Sync>(
    items: &[T],
    f: impl Fn(&T) -> Result<(f64, Vec<f64>)> + Sync,
) -> Result<(f64, Vec<f64>)> {
    let results: Vec<Result<(f64, Vec<f64>)>> = items.par_iter().map(&f).collect();
    let mut total = 0.0;
    let mut grads: Option<Vec<f64>> = None;
    for r in results {
        let (loss, g) = r?;
        total += loss;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    let n = items.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    for g in &mut grads {
        *g /= n;
    }
    Ok((total / n, grads))
}

/// Callback invoked after selected optimizer steps with the step index and
/// the current flat parameter vector (periodic checkpointing).
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &[f64]) -> Result<()>;

fn run_hook(hook: &mut Option<StepHook>, step: usize, params: &[f64]) -> Result<()> {
    if let Some(h) = hook {
        h(step, params)?;
    }
    Ok(())
}

/// Pretrains an autoregressive transformer on a token corpus by full-sequence
/// cross-entropy. Aborts with a diagnostic if the loss stops being finite.
pub fn train_teacher(
    corpus: &[Vec<Token>],
    arch: ArchConfig,
    opts: &TrainOptions,
) -> Result<(TransformerLm, TrainLog)> {
    train_teacher_hooked(corpus, arch, opts, None)
}

/// [`train_teacher`] with a periodic parameter hook.
pub fn train_teacher_hooked(
    corpus: &[Vec<Token>],
    arch: ArchConfig,
    opts: &TrainOptions,
    mut hook: Option<StepHook>,
) -> Result<(TransformerLm, TrainLog)> {
    if corpus.is_empty() {
        return Err(PtpError::InvalidInput("empty corpus".into()));
    }
    for seq in corpus {
        if seq.is_empty() || seq.len() + 1 > arch.max_seq {
            return Err(PtpError::InvalidInput(format!(
                "corpus sequence length {} outside 1..={}",
                seq.len(),
                arch.max_seq - 1
            )));
        }
    }
    let mut lm = TransformerLm::new(arch.clone(), opts.seed)?;
    let layout = lm.layout();
    let mut opt = Adam::new(opts.lr, layout.total);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7e5);
    let mut log = TrainLog::default();
    for step in 0..opts.steps {
        let batch: Vec<&Vec<Token>> = (0..opts.batch_size)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let params = &lm.params;
        let (loss, grads) = batch_grads(&batch, |seq| {
            let spec = NetSpec {
                arch: &arch,
                layout: &layout,
                aux_kind: None,
            };
            let mut inputs = Vec::with_capacity(seq.len());
            inputs.push(PosInput::Tok(crate::model::BOS_ID));
            inputs.extend(
                seq[..seq.len() - 1]
                    .iter()
                    .map(|&t| PosInput::Tok(crate::model::internal_id(t))),
            );
            let (logits, cache) = spec.forward(params, &inputs)?;
            let mut dlogits = Mat::zeros(logits.rows, logits.cols);
            let mut total = 0.0;
            for (k, &t) in seq.iter().enumerate() {
                let (value, grad) = slot_loss(logits.row(k), &SlotTarget::Hard(t), LossKind::Ce);
                total += value;
                for (d, g) in dlogits.row_mut(k).iter_mut().zip(&grad) {
                    *d = g / seq.len() as f64;
                }
            }
            let mut grads = vec![0.0; layout.total];
            spec.backward(params, &cache, &dlogits, &mut grads);
            Ok((total / seq.len() as f64, grads))
        })?;
        check_finite(loss, step)?;
        opt.lr = step_lr(opts, step);
        opt.step(&mut lm.params, &grads, opts.clip);
        run_hook(&mut hook, step, &lm.params)?;
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            log.log(step, loss);
        }
    }
    Ok((lm, log))
}

/// Mean per-token negative log-likelihood of a corpus under a transformer LM.
pub fn lm_nll(lm: &TransformerLm, corpus: &[Vec<Token>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        let rows = lm.sequence_logits(&[], seq)?;
        for (k, &t) in seq.iter().enumerate() {
            let (value, _) = slot_loss(&rows[k], &SlotTarget::Hard(t), LossKind::Ce);
            total += value;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Distillation configuration on top of [`TrainOptions`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillOptions {
    pub train: TrainOptions,
    pub loss: LossKind,
    pub proposal: ProposalKind,
    /// Beta shape for interval sampling.
    pub beta_b: f64,
    pub split: SplitPolicy,
    /// Sequence length for generated (teacher/student) proposals.
    pub seq_len: usize,
    /// Number of cached rollouts for the teacher proposal.
    pub pool_size: usize,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            train: TrainOptions::default(),
            loss: LossKind::Ce,
            proposal: ProposalKind::Teacher,
            beta_b: 1.0,
            split: SplitPolicy::Start,
            seq_len: 16,
            pool_size: 512,
        }
    }
}

/// Source sequences for one proposal batch.
struct ProposalState<'a> {
    teacher: &'a dyn ArModel,
    dataset: Option<&'a [Vec<Token>]>,
    /// Fully-extracted rollouts for the teacher proposal (split 0).
    pool: Vec<DistillExample>,
    skipped: usize,
}

impl<'a> ProposalState<'a> {
    fn new(
        teacher: &'a dyn ArModel,
        dataset: Option<&'a [Vec<Token>]>,
        opts: &DistillOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut state = Self {
            teacher,
            dataset,
            pool: Vec::new(),
            skipped: 0,
        };
        if opts.proposal == ProposalKind::Teacher {
            while state.pool.len() < opts.pool_size {
                let aux = AuxStream::uniform(opts.seq_len, rng);
                let tokens = sequential_sample(teacher, &[], aux.values(), opts.seq_len)?;
                match extract_auxiliaries(teacher, &tokens, 0, opts.beta_b, rng) {
                    Ok(ex) => state.pool.push(ex),
                    Err(PtpError::UnextractableToken { .. }) => state.skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        if opts.proposal == ProposalKind::Dataset && dataset.map_or(true, |d| d.is_empty()) {
            return Err(PtpError::InvalidConfig(
                "dataset proposal requires a non-empty corpus".into(),
            ));
        }
        Ok(state)
    }

    fn pick_split(&self, len: usize, window: usize, policy: SplitPolicy, rng: &mut ChaCha8Rng) -> usize {
        match policy {
            SplitPolicy::Start => 0,
            SplitPolicy::Uniform => rng.random_range(0..=len - window),
        }
    }

    /// Produces one batch of window-sized examples.
    fn batch(
        &mut self,
        student: &PtpModel,
        opts: &DistillOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<DistillExample>> {
        let window = student.config().window;
        let mut out = Vec::with_capacity(opts.train.batch_size);
        let mut attempts = 0usize;
        while out.len() < opts.train.batch_size {
            attempts += 1;
            if attempts > opts.train.batch_size * 50 {
                return Err(PtpError::InvalidInput(
                    "proposal source keeps yielding unextractable examples".into(),
                ));
            }
            match opts.proposal {
                ProposalKind::Teacher => {
                    let base = &self.pool[rng.random_range(0..self.pool.len())];
                    let split = self.pick_split(base.tokens.len(), window, opts.split, rng);
                    let mut ex = base.slice(split, window);
                    ex.redraw_aux(opts.beta_b, rng)?;
                    out.push(ex);
                }
                ProposalKind::Dataset => {
                    let corpus = self.dataset.expect("validated in new()");
                    let seq = &corpus[rng.random_range(0..corpus.len())];
                    if seq.len() < window {
                        return Err(PtpError::InvalidInput(format!(
                            "corpus sequence of length {} shorter than window {window}",
                            seq.len()
                        )));
                    }
                    let split = self.pick_split(seq.len(), window, opts.split, rng);
                    let tokens = seq[..split + window].to_vec();
                    match extract_auxiliaries(self.teacher, &tokens, split, opts.beta_b, rng) {
                        Ok(ex) => out.push(ex),
                        Err(PtpError::UnextractableToken { .. }) => self.skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                ProposalKind::Student => {
                    // One parallel student call proposes the window, the
                    // teacher re-labels it.
                    let len = opts.seq_len.max(window);
                    let aux = AuxStream::uniform(len, rng);
                    let tokens = student.decode_window(&[], aux.values())?;
                    let split = self.pick_split(tokens.len(), window, opts.split, rng);
                    let tokens = tokens[..split + window].to_vec();
                    match extract_auxiliaries(self.teacher, &tokens, split, opts.beta_b, rng) {
                        Ok(ex) => out.push(ex),
                        Err(PtpError::UnextractableToken { .. }) => self.skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Builds one batch of distillation examples from the requested proposal
/// source. Standalone entry point mirroring the training loop's batcher.
pub fn make_proposal_batch(
    student: &PtpModel,
    teacher: &dyn ArModel,
    dataset: Option<&[Vec<Token>]>,
    opts: &DistillOptions,
    seed: u64,
) -> Result<(Vec<DistillExample>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ProposalState::new(teacher, dataset, opts, &mut rng)?;
    let batch = state.batch(student, opts, &mut rng)?;
    Ok((batch, state.skipped))
}

/// Distills `student` from `teacher` (Eq-style cross-entropy or divergence
/// losses on reverse-engineered auxiliaries).
pub fn distill_train(
    student: &mut PtpModel,
    teacher: &dyn ArModel,
    dataset: Option<&[Vec<Token>]>,
    opts: &DistillOptions,
) -> Result<TrainLog> {
    distill_train_hooked(student, teacher, dataset, opts, None)
}

/// [`distill_train`] with a periodic parameter hook.
pub fn distill_train_hooked(
    student: &mut PtpModel,
    teacher: &dyn ArModel,
    dataset: Option<&[Vec<Token>]>,
    opts: &DistillOptions,
    mut hook: Option<StepHook>,
) -> Result<TrainLog> {
    if teacher.vocab() != student.config().arch.vocab {
        return Err(PtpError::InvalidConfig(
            "student and teacher vocabularies differ".into(),
        ));
    }
    let opts_inner = opts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.train.seed ^ 0x9e37);
    let mut state = ProposalState::new(teacher, dataset, &opts_inner, &mut rng)?;
    let layout = student.layout();
    let mut opt = Adam::new(opts.train.lr, layout.total);
    let mut log = TrainLog::default();
    for step in 0..opts.train.steps {
        let batch = state.batch(student, &opts_inner, &mut rng)?;
        for ex in &batch {
            debug_assert!(ex.check_invariant().is_ok());
        }
        let loss_kind = opts.loss;
        let student_ref = &*student;
        let (loss, grads) = batch_grads(&batch, |ex| distill_loss_grads(student_ref, ex, loss_kind))?;
        check_finite(loss, step)?;
        opt.lr = step_lr(&opts.train, step);
        opt.step(&mut student.params, &grads, opts.train.clip);
        run_hook(&mut hook, step, &student.params)?;
        if step % opts.train.log_every == 0 || step + 1 == opts.train.steps {
            log.log(step, loss);
        }
    }
    log.skipped_examples = state.skipped;
    Ok(log)
}

/// Trains the conditionally-independent baseline: the identical distillation
/// pipeline with the mask embedding, so the auxiliaries carry no information.
pub fn train_independent_baseline(
    student: &mut PtpModel,
    teacher: &dyn ArModel,
    dataset: Option<&[Vec<Token>]>,
    opts: &DistillOptions,
) -> Result<TrainLog> {
    if student.config().variant != PtpVariant::Independent {
        return Err(PtpError::InvalidConfig(
            "independent baseline requires the independent variant".into(),
        ));
    }
    distill_train(student, teacher, dataset, opts)
}

/// One inverse autoregressive training step on a single sequence: iterates
/// the window, extracting each position's auxiliary from the model's own
/// current conditional, then evaluates the window cross-entropy with the
/// collected auxiliaries held fixed.
///
/// Returns the loss, its parameter gradient, and the collected auxiliaries.
pub fn iat_step<R: Rng + ?Sized>(
    model: &PtpModel,
    tokens: &[Token],
    split: usize,
    b: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>, AuxStream)> {
    if model.config().variant != PtpVariant::Categorical {
        return Err(PtpError::InvalidConfig(
            "inverse autoregressive training requires the categorical variant".into(),
        ));
    }
    if split >= tokens.len() {
        return Err(PtpError::InvalidInput(
            "split leaves no prediction tokens".into(),
        ));
    }
    let window = tokens.len() - split;
    let context = &tokens[..split];
    let layout = model.layout();
    let spec = NetSpec {
        arch: &model.config().arch,
        layout: &layout,
        aux_kind: model.aux_kind(),
    };
    let mut inputs: Vec<PosInput> = Vec::with_capacity(1 + tokens.len());
    inputs.push(PosInput::Tok(crate::model::BOS_ID));
    inputs.extend(context.iter().map(|&t| PosInput::Tok(crate::model::internal_id(t))));
    let mut aux = AuxStream::default();
    // Alternate: conditional for slot k (which sees u_0..u_{k-1}), then draw
    // a compatible u_k from it.
    for k in 0..window {
        let (logits, _) = spec.forward(&model.params, &inputs)?;
        let row = logits.row(logits.rows - 1);
        let dist = Categorical::from_logits(row)?;
        let floored = Categorical::from_probs_floored(dist.probs(), PROB_FLOOR)?;
        let target = tokens[split + k];
        let interval = floored.compatible_interval(target).map_err(|_| {
            PtpError::UnextractableToken {
                token: target,
                position: split + k,
            }
        })?;
        let u = match sample_in_interval(interval, b, rng) {
            Ok(u) => u,
            Err(PtpError::UnrepresentableInterval { .. }) => {
                return Err(PtpError::UnextractableToken {
                    token: target,
                    position: split + k,
                })
            }
            Err(e) => return Err(e),
        };
        debug_assert_eq!(floored.pick(u.as_f64()), target);
        aux.push(u);
        inputs.push(PosInput::Aux(u.as_f64()));
    }
    // Full-window loss with the collected auxiliaries fixed.
    let (loss, grads) = iat_loss_grads(model, tokens, split, &aux)?;
    Ok((loss, grads, aux))
}

/// Window cross-entropy of a categorical model given fixed auxiliaries
/// (the objective optimized by inverse autoregressive training), with its
/// parameter gradient.
pub fn iat_loss_grads(
    model: &PtpModel,
    tokens: &[Token],
    split: usize,
    aux: &AuxStream,
) -> Result<(f64, Vec<f64>)> {
    let window = tokens.len() - split;
    if aux.len() != window {
        return Err(PtpError::InvalidInput(format!(
            "auxiliary stream of length {} for window {window}",
            aux.len()
        )));
    }
    let example = DistillExample {
        tokens: tokens.to_vec(),
        split,
        aux: aux.clone(),
        teacher_dists: Vec::new(),
        intervals: vec![AuxInterval { lo: 0.0, hi: 1.0 }; window],
    };
    distill_loss_grads(model, &example, LossKind::Ce)
}

/// Inverse autoregressive training over a corpus.
pub fn train_iat(
    model: &mut PtpModel,
    corpus: &[Vec<Token>],
    opts: &DistillOptions,
) -> Result<TrainLog> {
    train_iat_hooked(model, corpus, opts, None)
}

/// [`train_iat`] with a periodic parameter hook.
pub fn train_iat_hooked(
    model: &mut PtpModel,
    corpus: &[Vec<Token>],
    opts: &DistillOptions,
    mut hook: Option<StepHook>,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(PtpError::InvalidInput("empty corpus".into()));
    }
    let window = model.config().window;
    for seq in corpus {
        if seq.len() < window {
            return Err(PtpError::InvalidInput(format!(
                "corpus sequence of length {} shorter than window {window}",
                seq.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.train.seed ^ 0x1a7);
    let layout = model.layout();
    let mut opt = Adam::new(opts.train.lr, layout.total);
    let mut log = TrainLog::default();
    for step in 0..opts.train.steps {
        let mut items = Vec::with_capacity(opts.train.batch_size);
        for _ in 0..opts.train.batch_size {
            let seq = &corpus[rng.random_range(0..corpus.len())];
            let split = match opts.split {
                SplitPolicy::Start => 0,
                SplitPolicy::Uniform => rng.random_range(0..=seq.len() - window),
            };
            let tokens = seq[..split + window].to_vec();
            // Auxiliary extraction depends on current parameters and must be
            // sequential per item; seeds are derived per item for
            // reproducibility independent of scheduling.
            items.push((tokens, split, rng.random::<u64>()));
        }
        let model_ref = &*model;
        let b = opts.beta_b;
        let (loss, grads) = batch_grads(&items, |(tokens, split, item_seed)| {
            let mut item_rng = ChaCha8Rng::seed_from_u64(*item_seed);
            let (loss, grads, _) = iat_step(model_ref, tokens, *split, b, &mut item_rng)?;
            Ok((loss, grads))
        })?;
        check_finite(loss, step)?;
        opt.lr = step_lr(&opts.train, step);
        opt.step(&mut model.params, &grads, opts.train.clip);
        run_hook(&mut hook, step, &model.params)?;
        if step % opts.train.log_every == 0 || step + 1 == opts.train.steps {
            log.log(step, loss);
        }
    }
    Ok(log)
}

/// Monte-Carlo estimate of a categorical model's per-token NLL on a corpus:
/// windows are scored left to right, extracting each auxiliary from the
/// model's own conditional exactly as in training. An upper bound on the
/// model's true NLL (single-draw estimate), exact at convergence.
pub fn iat_nll(model: &PtpModel, corpus: &[Vec<Token>], seed: u64) -> Result<f64> {
    let window = model.config().window;
    let mut total = 0.0;
    let mut count = 0usize;
    let results: Vec<Result<(f64, usize)>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let mut nll = 0.0;
            let mut n = 0usize;
            let mut start = 0;
            while start < seq.len() {
                let w = window.min(seq.len() - start);
                let tokens = &seq[..start + w];
                let (grads_loss, _, _) = iat_step(model, tokens, start, 1.0, &mut rng)?;
                nll += grads_loss * w as f64;
                n += w;
                start += w;
            }
            Ok((nll, n))
        })
        .collect();
    for r in results {
        let (nll, n) = r?;
        total += nll;
        count += n;
    }
    Ok(total / count as f64)
}
