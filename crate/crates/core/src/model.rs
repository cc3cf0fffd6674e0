//! The PTP student model: a causal transformer that reads context tokens
//! followed by embedded auxiliary variables and emits a token distribution
//! per prediction slot.
//!
//! Head alignment is the load-bearing detail. With a context of `m` input
//! rows (BOS plus context tokens) and auxiliaries `u_0..u_{N-1}` occupying
//! rows `m..m+N-1`:
//!
//! - one-hot mode reads slot `k`'s logits at row `m + k`, which attends to
//!   `u_0..u_k` — the head that should collapse onto the sampled token;
//! - categorical and independent modes read slot `k` at row `m + k - 1`,
//!   the standard next-token shift, so the distribution for token `k` never
//!   sees its own auxiliary `u_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PtpError, Result};
use crate::nn::{self, ArchConfig, AuxParams, Layout, Mat};
use crate::sampling::{AuxValue, Categorical};
use crate::Token;

/// Reserved internal id for the beginning-of-sequence row; data tokens are
/// shifted up by one inside the network and never produced as output.
pub(crate) const BOS_ID: usize = 0;

#[inline]
pub(crate) fn internal_id(t: Token) -> usize {
    t + 1
}

/// How a model consumes auxiliary variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedKind {
    /// Scalar value through a two-layer perceptron.
    FlNn,
    /// Threshold features `1{u <= i/n}` through an affine map.
    ThLin,
    /// Threshold features through a two-layer perceptron.
    ThNn,
    /// Doubling-map bit features `1{u 2^(i-1) mod 1 <= 1/2}` through an
    /// affine map. The default.
    ArLin,
    /// Doubling-map bit features through a two-layer perceptron.
    ArNn,
    /// A single learned vector; the auxiliary value is ignored.
    Mask,
}

impl EmbedKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fl+nn" => Ok(Self::FlNn),
            "th+lin" => Ok(Self::ThLin),
            "th+nn" => Ok(Self::ThNn),
            "ar+lin" => Ok(Self::ArLin),
            "ar+nn" => Ok(Self::ArNn),
            "mask" => Ok(Self::Mask),
            other => Err(PtpError::InvalidConfig(format!(
                "unknown embedding kind {other:?} (expected fl+nn, th+lin, th+nn, ar+lin, ar+nn, or mask)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FlNn => "fl+nn",
            Self::ThLin => "th+lin",
            Self::ThNn => "th+nn",
            Self::ArLin => "ar+lin",
            Self::ArNn => "ar+nn",
            Self::Mask => "mask",
        }
    }

    /// Width of the feature vector fed to the embedding net.
    pub fn feature_dim(&self, n: usize) -> usize {
        match self {
            Self::FlNn => 1,
            Self::ThLin | Self::ThNn | Self::ArLin | Self::ArNn => n,
            Self::Mask => 0,
        }
    }

    pub(crate) fn aux_params(&self, n: usize) -> AuxParams {
        match self {
            Self::FlNn | Self::ThNn | Self::ArNn => AuxParams::Mlp {
                nf: self.feature_dim(n),
            },
            Self::ThLin | Self::ArLin => AuxParams::Linear {
                nf: self.feature_dim(n),
            },
            Self::Mask => AuxParams::Mask,
        }
    }
}

/// Feature vector for an auxiliary value under a given embedding kind.
///
/// `th`: `e_i = 1{u <= i/n}` for `i = 0..n-1`.
/// `ar`: `e_i = 1{u 2^(i-1) mod 1 <= 1/2}` for `i = 1..n`.
/// `fl`: the scalar itself. `mask` has no features.
pub fn aux_features(kind: EmbedKind, n: usize, u: f64) -> Vec<f64> {
    match kind {
        EmbedKind::FlNn => vec![u],
        EmbedKind::ThLin | EmbedKind::ThNn => (0..n)
            .map(|i| if u <= i as f64 / n as f64 { 1.0 } else { 0.0 })
            .collect(),
        EmbedKind::ArLin | EmbedKind::ArNn => (1..=n)
            .map(|i| {
                let scaled = u * (2f64).powi(i as i32 - 1);
                if scaled.fract() <= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
        EmbedKind::Mask => Vec::new(),
    }
}

/// Prediction mode of a PTP model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtpVariant {
    /// Heads collapse onto the sampled token; decoded by argmax.
    OneHot,
    /// Heads carry the full conditional; decoded by `pick` with `u_k`.
    Categorical,
    /// Mask-embedded baseline: heads are conditionally independent.
    Independent,
}

impl PtpVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_hot" | "o-ptp" => Ok(Self::OneHot),
            "categorical" | "c-ptp" => Ok(Self::Categorical),
            "independent" | "mtp" => Ok(Self::Independent),
            other => Err(PtpError::InvalidConfig(format!(
                "unknown variant {other:?} (expected one_hot, categorical, or independent)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OneHot => "one_hot",
            Self::Categorical => "categorical",
            Self::Independent => "independent",
        }
    }
}

/// Full configuration of a PTP model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PtpConfig {
    pub variant: PtpVariant,
    /// Number of tokens predicted per call.
    pub window: usize,
    pub embed_kind: EmbedKind,
    /// Feature width `n` for th/ar embeddings.
    pub embed_width: usize,
    pub arch: ArchConfig,
}

impl PtpConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.window == 0 {
            return Err(PtpError::InvalidConfig("window must be >= 1".into()));
        }
        if self.window + 1 > self.arch.max_seq {
            return Err(PtpError::InvalidConfig(format!(
                "window {} does not fit in max_seq {}",
                self.window, self.arch.max_seq
            )));
        }
        if self.embed_kind != EmbedKind::Mask && self.embed_width == 0 {
            return Err(PtpError::InvalidConfig("embed_width must be >= 1".into()));
        }
        if self.variant == PtpVariant::Independent && self.embed_kind != EmbedKind::Mask {
            return Err(PtpError::InvalidConfig(
                "independent variant requires the mask embedding".into(),
            ));
        }
        Ok(())
    }
}

/// One input row of the network: either a token or an auxiliary value.
#[derive(Debug, Clone, Copy)]
pub(crate) enum PosInput {
    /// Internal token id (BOS or shifted data token).
    Tok(usize),
    Aux(f64),
}

pub(crate) struct FullCache {
    core: nn::Cache,
    inputs: Vec<PosInput>,
    /// Per aux position: feature vector (empty for mask).
    feats: Vec<Option<Vec<f64>>>,
    /// Per aux position: tanh hidden layer for MLP embeddings.
    h1: Vec<Option<Vec<f64>>>,
}

/// Shared forward/backward over the flat parameter vector, parameterized by
/// whether (and how) auxiliary rows are embedded.
pub(crate) struct NetSpec<'a> {
    pub arch: &'a ArchConfig,
    pub layout: &'a Layout,
    pub aux_kind: Option<(EmbedKind, usize)>,
}

impl<'a> NetSpec<'a> {
    fn embed_aux_row(
        &self,
        params: &[f64],
        u: f64,
    ) -> (Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let (kind, n) = self.aux_kind.expect("aux row in a model without aux params");
        let h = self.arch.hidden;
        let aux = &self.layout.aux;
        match kind {
            EmbedKind::Mask => (params[aux.mask.clone()].to_vec(), None, None),
            EmbedKind::ThLin | EmbedKind::ArLin => {
                let f = aux_features(kind, n, u);
                let mut out = params[aux.b1.clone()].to_vec();
                let w1 = &params[aux.w1.clone()];
                for (k, &fv) in f.iter().enumerate() {
                    if fv != 0.0 {
                        for (o, &w) in out.iter_mut().zip(&w1[k * h..(k + 1) * h]) {
                            *o += fv * w;
                        }
                    }
                }
                (out, Some(f), None)
            }
            EmbedKind::FlNn | EmbedKind::ThNn | EmbedKind::ArNn => {
                let f = aux_features(kind, n, u);
                let mut z = params[aux.b1.clone()].to_vec();
                let w1 = &params[aux.w1.clone()];
                for (k, &fv) in f.iter().enumerate() {
                    if fv != 0.0 {
                        for (o, &w) in z.iter_mut().zip(&w1[k * h..(k + 1) * h]) {
                            *o += fv * w;
                        }
                    }
                }
                let h1: Vec<f64> = z.iter().map(|&v| v.tanh()).collect();
                let mut out = params[aux.b2.clone()].to_vec();
                let w2 = &params[aux.w2.clone()];
                for (k, &hv) in h1.iter().enumerate() {
                    for (o, &w) in out.iter_mut().zip(&w2[k * h..(k + 1) * h]) {
                        *o += hv * w;
                    }
                }
                (out, Some(f), Some(h1))
            }
        }
    }

    pub fn forward(&self, params: &[f64], inputs: &[PosInput]) -> Result<(Mat, FullCache)> {
        if inputs.len() > self.arch.max_seq {
            return Err(PtpError::InvalidInput(format!(
                "input length {} exceeds max_seq {}",
                inputs.len(),
                self.arch.max_seq
            )));
        }
        let h = self.arch.hidden;
        let mut x0 = Mat::zeros(inputs.len(), h);
        let mut feats = Vec::with_capacity(inputs.len());
        let mut h1s = Vec::with_capacity(inputs.len());
        for (p, item) in inputs.iter().enumerate() {
            let row = x0.row_mut(p);
            match *item {
                PosInput::Tok(id) => {
                    debug_assert!(id < self.arch.vocab + 1);
                    let emb = &params[self.layout.tok_emb.clone()][id * h..(id + 1) * h];
                    row.copy_from_slice(emb);
                    feats.push(None);
                    h1s.push(None);
                }
                PosInput::Aux(u) => {
                    let (emb, f, h1) = self.embed_aux_row(params, u);
                    row.copy_from_slice(&emb);
                    feats.push(f);
                    h1s.push(h1);
                }
            }
            let pos = &params[self.layout.pos_emb.clone()][p * h..(p + 1) * h];
            for (r, &pv) in row.iter_mut().zip(pos) {
                *r += pv;
            }
        }
        let (logits, core) = nn::forward_core(self.arch, self.layout, params, &x0);
        Ok((
            logits,
            FullCache {
                core,
                inputs: inputs.to_vec(),
                feats,
                h1: h1s,
            },
        ))
    }

    /// Backward through the core and the embedding layer; accumulates into
    /// `grads` (same layout as the parameter vector).
    pub fn backward(&self, params: &[f64], cache: &FullCache, dlogits: &Mat, grads: &mut [f64]) {
        let h = self.arch.hidden;
        let dx0 = nn::backward_core(self.arch, self.layout, params, &cache.core, dlogits, grads);
        for (p, item) in cache.inputs.iter().enumerate() {
            let drow = dx0.row(p);
            let pos = &mut grads[self.layout.pos_emb.clone()][p * h..(p + 1) * h];
            for (g, &d) in pos.iter_mut().zip(drow) {
                *g += d;
            }
            match *item {
                PosInput::Tok(id) => {
                    let emb = &mut grads[self.layout.tok_emb.clone()][id * h..(id + 1) * h];
                    for (g, &d) in emb.iter_mut().zip(drow) {
                        *g += d;
                    }
                }
                PosInput::Aux(_) => {
                    let (kind, _) = self.aux_kind.expect("aux row without aux params");
                    let aux = self.layout.aux.clone();
                    match kind {
                        EmbedKind::Mask => {
                            for (g, &d) in grads[aux.mask].iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                        EmbedKind::ThLin | EmbedKind::ArLin => {
                            let f = cache.feats[p].as_ref().unwrap();
                            for (k, &fv) in f.iter().enumerate() {
                                if fv != 0.0 {
                                    let wrow = &mut grads[aux.w1.clone()][k * h..(k + 1) * h];
                                    for (g, &d) in wrow.iter_mut().zip(drow) {
                                        *g += fv * d;
                                    }
                                }
                            }
                            for (g, &d) in grads[aux.b1].iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                        EmbedKind::FlNn | EmbedKind::ThNn | EmbedKind::ArNn => {
                            let f = cache.feats[p].as_ref().unwrap();
                            let h1 = cache.h1[p].as_ref().unwrap();
                            for (k, &hv) in h1.iter().enumerate() {
                                let wrow = &mut grads[aux.w2.clone()][k * h..(k + 1) * h];
                                for (g, &d) in wrow.iter_mut().zip(drow) {
                                    *g += hv * d;
                                }
                            }
                            for (g, &d) in grads[aux.b2.clone()].iter_mut().zip(drow) {
                                *g += d;
                            }
                            let w2 = &params[aux.w2.clone()];
                            let mut dpre = vec![0.0; h];
                            for (k, dp) in dpre.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (c, &d) in drow.iter().enumerate() {
                                    acc += w2[k * h + c] * d;
                                }
                                *dp = acc * (1.0 - h1[k] * h1[k]);
                            }
                            for (k, &fv) in f.iter().enumerate() {
                                if fv != 0.0 {
                                    let wrow = &mut grads[aux.w1.clone()][k * h..(k + 1) * h];
                                    for (g, &d) in wrow.iter_mut().zip(&dpre) {
                                        *g += fv * d;
                                    }
                                }
                            }
                            for (g, &d) in grads[aux.b1.clone()].iter_mut().zip(&dpre) {
                                *g += d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A plain autoregressive transformer language model over `vocab` tokens.
#[derive(Debug, Clone)]
pub struct TransformerLm {
    arch: ArchConfig,
    pub(crate) params: Vec<f64>,
}

impl TransformerLm {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, AuxParams::None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nn::init_params(&arch, &layout, &mut rng);
        Ok(Self { arch, params })
    }

    pub(crate) fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, AuxParams::None);
        if params.len() != layout.total {
            return Err(PtpError::InvalidInput(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.arch, AuxParams::None)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        for &t in tokens {
            if t >= self.arch.vocab {
                return Err(PtpError::InvalidInput(format!(
                    "token {t} out of vocabulary of size {}",
                    self.arch.vocab
                )));
            }
        }
        Ok(())
    }

    /// Logit row for the token following `context`.
    pub fn next_logits(&self, context: &[Token]) -> Result<Vec<f64>> {
        Ok(self
            .sequence_logits(context, &[])?
            .pop()
            .expect("at least the BOS row"))
    }

    /// Logit rows for every position of `tokens` after `context`: row `k`
    /// scores `tokens[k]` given `context ++ tokens[..k]`. With empty
    /// `tokens`, returns the single next-token row after `context`.
    ///
    /// One causal forward pass; each returned row is bitwise identical to
    /// what a separate shorter call would produce.
    pub fn sequence_logits(&self, context: &[Token], tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(context)?;
        self.check_tokens(tokens)?;
        let fed = if tokens.is_empty() {
            tokens
        } else {
            &tokens[..tokens.len() - 1]
        };
        let mut inputs = Vec::with_capacity(1 + context.len() + fed.len());
        inputs.push(PosInput::Tok(BOS_ID));
        inputs.extend(context.iter().map(|&t| PosInput::Tok(internal_id(t))));
        inputs.extend(fed.iter().map(|&t| PosInput::Tok(internal_id(t))));
        let layout = self.layout();
        let spec = NetSpec {
            arch: &self.arch,
            layout: &layout,
            aux_kind: None,
        };
        let (logits, _) = spec.forward(&self.params, &inputs)?;
        let start = context.len();
        let count = tokens.len().max(1);
        Ok((start..start + count)
            .map(|p| logits.row(p).to_vec())
            .collect())
    }
}

/// Output of a PTP window forward pass.
pub struct WindowForward {
    logits: Mat,
    ctx_rows: usize,
    window: usize,
    variant: PtpVariant,
}

impl WindowForward {
    /// Logit row backing prediction slot `k`, respecting the variant's
    /// head alignment.
    pub fn slot_logits(&self, k: usize) -> &[f64] {
        assert!(k < self.window, "slot {k} out of window {}", self.window);
        let row = match self.variant {
            PtpVariant::OneHot => self.ctx_rows + k,
            PtpVariant::Categorical | PtpVariant::Independent => self.ctx_rows + k - 1,
        };
        self.logits.row(row)
    }

    /// Double-precision max-subtracted softmax of slot `k`'s logits.
    pub fn slot_dist(&self, k: usize) -> Result<Categorical> {
        Categorical::from_logits(self.slot_logits(k))
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn variant(&self) -> PtpVariant {
        self.variant
    }

    /// Raw logits at an absolute input row (testing hook for causality).
    pub fn row_logits(&self, row: usize) -> &[f64] {
        self.logits.row(row)
    }

    pub fn rows(&self) -> usize {
        self.logits.rows
    }
}

/// The PTP student model.
#[derive(Debug, Clone)]
pub struct PtpModel {
    cfg: PtpConfig,
    pub(crate) params: Vec<f64>,
}

impl PtpModel {
    pub fn new(cfg: PtpConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.arch, cfg.embed_kind.aux_params(cfg.embed_width));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = nn::init_params(&cfg.arch, &layout, &mut rng);
        Ok(Self { cfg, params })
    }

    pub(crate) fn from_params(cfg: PtpConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.arch, cfg.embed_kind.aux_params(cfg.embed_width));
        if params.len() != layout.total {
            return Err(PtpError::InvalidInput(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &PtpConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(
            &self.cfg.arch,
            self.cfg.embed_kind.aux_params(self.cfg.embed_width),
        )
    }

    pub(crate) fn aux_kind(&self) -> Option<(EmbedKind, usize)> {
        Some((self.cfg.embed_kind, self.cfg.embed_width))
    }

    /// Copies backbone weights from a teacher with the same architecture and
    /// re-initializes the auxiliary embedding near zero, so the fresh student
    /// starts out approximating the teacher under mask-like inputs.
    pub fn warm_start_from(&mut self, teacher: &TransformerLm, seed: u64) -> Result<()> {
        if *teacher.arch() != self.cfg.arch {
            return Err(PtpError::InvalidConfig(
                "warm start requires matching architectures".into(),
            ));
        }
        let layout = self.layout();
        let backbone_end = layout.head_b.end;
        self.params[..backbone_end].copy_from_slice(&teacher.params[..backbone_end]);
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = rand_distr::Normal::new(0.0, 1e-3).unwrap();
        for v in &mut self.params[backbone_end..] {
            *v = small.sample(&mut rng);
        }
        Ok(())
    }

    /// The embedding-layer vector for auxiliary value `u` (before the
    /// positional row is added). For the mask kind the result ignores `u`.
    pub fn embed_aux(&self, u: AuxValue) -> Vec<f64> {
        let layout = self.layout();
        let spec = NetSpec {
            arch: &self.cfg.arch,
            layout: &layout,
            aux_kind: self.aux_kind(),
        };
        spec.embed_aux_row(&self.params, u.as_f64()).0
    }

    pub(crate) fn window_inputs(
        &self,
        context: &[Token],
        aux: &[AuxValue],
    ) -> Result<Vec<PosInput>> {
        for &t in context {
            if t >= self.cfg.arch.vocab {
                return Err(PtpError::InvalidInput(format!(
                    "context token {t} out of vocabulary of size {}",
                    self.cfg.arch.vocab
                )));
            }
        }
        if aux.is_empty() {
            return Err(PtpError::InvalidInput("empty auxiliary stream".into()));
        }
        let total = 1 + context.len() + aux.len();
        if total > self.cfg.arch.max_seq {
            return Err(PtpError::InvalidInput(format!(
                "context {} + window {} exceeds max_seq {}",
                context.len(),
                aux.len(),
                self.cfg.arch.max_seq
            )));
        }
        let mut inputs = Vec::with_capacity(total);
        inputs.push(PosInput::Tok(BOS_ID));
        inputs.extend(context.iter().map(|&t| PosInput::Tok(internal_id(t))));
        inputs.extend(aux.iter().map(|u| PosInput::Aux(u.as_f64())));
        Ok(inputs)
    }

    /// Single forward pass over `context` plus a window of auxiliaries.
    /// The window size is `aux.len()`, which may be smaller than the trained
    /// window (restricted-N evaluation).
    pub fn forward(&self, context: &[Token], aux: &[AuxValue]) -> Result<WindowForward> {
        let inputs = self.window_inputs(context, aux)?;
        let layout = self.layout();
        let spec = NetSpec {
            arch: &self.cfg.arch,
            layout: &layout,
            aux_kind: self.aux_kind(),
        };
        let (logits, _) = spec.forward(&self.params, &inputs)?;
        Ok(WindowForward {
            logits,
            ctx_rows: 1 + context.len(),
            window: aux.len(),
            variant: self.cfg.variant,
        })
    }

    /// One-hot decoding: argmax of each slot's logits, ties to the lowest
    /// index. One forward pass.
    pub fn decode_one_hot(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>> {
        let fwd = self.forward(context, aux)?;
        Ok((0..aux.len())
            .map(|k| argmax_lowest(fwd.slot_logits(k)))
            .collect())
    }

    /// Categorical decoding: `pick(u_k, softmax(slot k))`, where slot `k`'s
    /// head conditions on `u_0..u_{k-1}` only. One forward pass.
    pub fn decode_categorical(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>> {
        let fwd = self.forward(context, aux)?;
        let mut out = Vec::with_capacity(aux.len());
        for (k, u) in aux.iter().enumerate() {
            let dist = fwd.slot_dist(k)?;
            out.push(dist.pick(u.as_f64()));
        }
        Ok(out)
    }

    /// Decodes a window according to the configured variant.
    pub fn decode_window(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>> {
        match self.cfg.variant {
            PtpVariant::OneHot => self.decode_one_hot(context, aux),
            PtpVariant::Categorical | PtpVariant::Independent => {
                self.decode_categorical(context, aux)
            }
        }
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Anything that can draft a window of tokens from a context and a stream of
/// auxiliary values.
pub trait WindowDecoder {
    fn decode_window(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>>;
}

impl WindowDecoder for PtpModel {
    fn decode_window(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>> {
        PtpModel::decode_window(self, context, aux)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::AuxStream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cfg(variant: PtpVariant, embed: EmbedKind) -> PtpConfig {
        PtpConfig {
            variant,
            window: 4,
            embed_kind: embed,
            embed_width: 8,
            arch: ArchConfig {
                vocab: 6,
                hidden: 16,
                layers: 2,
                heads: 2,
                max_seq: 16,
                ff: None,
            },
        }
    }

    #[test]
    fn ar_features_of_half() {
        // u = 0.5: every doubling lands on 0.5 or 0.0, all below threshold.
        assert_eq!(
            aux_features(EmbedKind::ArLin, 4, 0.5),
            vec![1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn th_features_of_point_three() {
        assert_eq!(
            aux_features(EmbedKind::ThLin, 4, 0.3),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn mask_embedding_ignores_u() {
        let model = PtpModel::new(test_cfg(PtpVariant::Independent, EmbedKind::Mask), 1).unwrap();
        let a = model.embed_aux(AuxValue::new(0.1).unwrap());
        let b = model.embed_aux(AuxValue::new(0.9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn embed_kinds_roundtrip_names() {
        for kind in [
            EmbedKind::FlNn,
            EmbedKind::ThLin,
            EmbedKind::ThNn,
            EmbedKind::ArLin,
            EmbedKind::ArNn,
            EmbedKind::Mask,
        ] {
            assert_eq!(EmbedKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(EmbedKind::parse("bogus").is_err());
    }

    #[test]
    fn perturbing_a_later_auxiliary_leaves_earlier_logits_unchanged() {
        let model = PtpModel::new(test_cfg(PtpVariant::OneHot, EmbedKind::ArLin), 2).unwrap();
        let ctx = [1usize, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let aux = AuxStream::uniform(4, &mut rng);
        let mut aux2 = aux.values().to_vec();
        aux2[2] = AuxValue::new((aux2[2].value() + 0.41) % 1.0).unwrap();
        let a = model.forward(&ctx, aux.values()).unwrap();
        let b = model.forward(&ctx, &aux2).unwrap();
        let m = 1 + ctx.len();
        for row in 0..m + 2 {
            assert_eq!(a.row_logits(row), b.row_logits(row), "row {row}");
        }
        assert_ne!(a.row_logits(m + 2), b.row_logits(m + 2));
    }

    #[test]
    fn categorical_slot_dist_invariant_to_own_auxiliary() {
        // The head that samples token k must not see u_k.
        let model = PtpModel::new(test_cfg(PtpVariant::Categorical, EmbedKind::ArLin), 3).unwrap();
        let ctx = [0usize, 5, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let aux = AuxStream::uniform(4, &mut rng);
        for k in 0..4 {
            let mut aux2 = aux.values().to_vec();
            aux2[k] = AuxValue::new((aux2[k].value() + 0.37) % 1.0).unwrap();
            let a = model.forward(&ctx, aux.values()).unwrap();
            let b = model.forward(&ctx, &aux2).unwrap();
            assert_eq!(a.slot_logits(k), b.slot_logits(k), "slot {k} leaked its own u");
        }
    }

    #[test]
    fn independent_variant_ignores_auxiliary_permutation() {
        let model = PtpModel::new(test_cfg(PtpVariant::Independent, EmbedKind::Mask), 4).unwrap();
        let ctx = [2usize];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let aux = AuxStream::uniform(4, &mut rng);
        let mut swapped = aux.values().to_vec();
        swapped.reverse();
        let a = model.forward(&ctx, aux.values()).unwrap();
        let b = model.forward(&ctx, &swapped).unwrap();
        for k in 0..4 {
            assert_eq!(a.slot_logits(k), b.slot_logits(k));
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let model = PtpModel::new(test_cfg(PtpVariant::OneHot, EmbedKind::ArNn), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let aux = AuxStream::uniform(4, &mut rng);
        let a = model.decode_one_hot(&[1, 2], aux.values()).unwrap();
        let b = model.decode_one_hot(&[1, 2], aux.values()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t < 6));
    }

    #[test]
    fn window_overflow_is_rejected() {
        let model = PtpModel::new(test_cfg(PtpVariant::OneHot, EmbedKind::ArLin), 6).unwrap();
        let ctx: Vec<usize> = vec![0; 13];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let aux = AuxStream::uniform(4, &mut rng);
        assert!(model.forward(&ctx, aux.values()).is_err());
        assert!(model.forward(&[9999], aux.values()).is_err());
        assert!(model.forward(&[], &[]).is_err());
    }

    #[test]
    fn warm_start_requires_matching_arch() {
        let mut model = PtpModel::new(test_cfg(PtpVariant::OneHot, EmbedKind::ArLin), 7).unwrap();
        let arch_ok = ArchConfig {
            vocab: 6,
            hidden: 16,
            layers: 2,
            heads: 2,
            max_seq: 16,
            ff: None,
        };
        let teacher = TransformerLm::new(arch_ok.clone(), 8).unwrap();
        model.warm_start_from(&teacher, 9).unwrap();
        let other = TransformerLm::new(
            ArchConfig {
                vocab: 7,
                ..arch_ok
            },
            8,
        )
        .unwrap();
        assert!(model.warm_start_from(&other, 9).is_err());
    }

    #[test]
    fn independent_config_requires_mask() {
        let cfg = test_cfg(PtpVariant::Independent, EmbedKind::ArLin);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequence_logits_match_next_logits() {
        let lm = TransformerLm::new(
            ArchConfig {
                vocab: 5,
                hidden: 16,
                layers: 1,
                heads: 2,
                max_seq: 12,
                ff: None,
            },
            20,
        )
        .unwrap();
        let seq = [3usize, 1, 4, 0];
        let rows = lm.sequence_logits(&[], &seq).unwrap();
        assert_eq!(rows.len(), seq.len());
        for k in 0..seq.len() {
            let direct = lm.next_logits(&seq[..k]).unwrap();
            assert_eq!(rows[k], direct, "position {k}");
        }
    }
}
