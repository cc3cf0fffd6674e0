//! Run configuration and orchestration: the TOML config schema, run
//! directories (config snapshot, periodic checkpoints, metrics log),
//! evaluation drivers, and the table exporter used by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::decode::{
    best_of_m_sweep, generate_with_verification, restricted_n_sweep, BestOfRow, EvalSet, SweepRow,
};
use crate::error::{PtpError, Result};
use crate::harness::{atomic_write, load_token_file, pair_region_map, synth_generate, SynthConfig, VerifierSupport};
use crate::model::{EmbedKind, PtpConfig, PtpModel, PtpVariant, TransformerLm, WindowDecoder};
use crate::nn::ArchConfig;
use crate::sampling::ShapingParams;
use crate::teacher::{ArModel, OracleDecoder, TransformerTeacher};
use crate::train::{
    self, iat_nll, lm_nll, DistillOptions, LossKind, MetricRow, ProposalKind, SplitPolicy,
    TrainOptions,
};
use crate::Token;

pub const METRICS_VERSION: &str = "# ptp-metrics-v1";

/// Where training sequences come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `synth` or `file`.
    pub source: String,
    /// Token file path when `source = "file"`.
    pub path: String,
    pub states: usize,
    pub concentration: f64,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub seed: u64,
    /// Fraction of sequences held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            source: "synth".into(),
            path: String::new(),
            states: synth.states,
            concentration: synth.concentration,
            seq_len: synth.seq_len,
            corpus_size: synth.corpus_size,
            seed: synth.seed,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            states: self.states,
            concentration: self.concentration,
            seq_len: self.seq_len,
            corpus_size: self.corpus_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub ff: Option<usize>,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: 48,
            layers: 2,
            heads: 2,
            max_seq: 96,
            ff: None,
            temperature: 1.0,
            top_k: None,
            top_p: None,
        }
    }
}

impl TeacherConfig {
    pub fn arch(&self, vocab: usize) -> ArchConfig {
        ArchConfig {
            vocab,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            max_seq: self.max_seq,
            ff: self.ff,
        }
    }

    pub fn shaping(&self) -> ShapingParams {
        ShapingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub variant: String,
    pub window: usize,
    pub embed_kind: String,
    pub embed_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub ff: Option<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            variant: "one_hot".into(),
            window: 16,
            embed_kind: "ar+lin".into(),
            embed_width: 32,
            hidden: 48,
            layers: 2,
            heads: 2,
            max_seq: 96,
            ff: None,
        }
    }
}

impl StudentConfig {
    pub fn ptp_config(&self, vocab: usize) -> Result<PtpConfig> {
        let variant = PtpVariant::parse(&self.variant)?;
        let embed_kind = if variant == PtpVariant::Independent {
            EmbedKind::Mask
        } else {
            EmbedKind::parse(&self.embed_kind)?
        };
        let cfg = PtpConfig {
            variant,
            window: self.window,
            embed_kind,
            embed_width: self.embed_width,
            arch: ArchConfig {
                vocab,
                hidden: self.hidden,
                layers: self.layers,
                heads: self.heads,
                max_seq: self.max_seq,
                ff: self.ff,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: Option<f64>,
    pub cosine_decay: bool,
    pub seed: u64,
    pub log_every: usize,
    /// Save a checkpoint every this many steps (0: only step 0 and final).
    pub ckpt_every: usize,
    pub loss: String,
    pub proposal: String,
    pub beta_b: f64,
    /// `start` or `uniform`.
    pub split: String,
    /// Sequence length of generated proposals.
    pub proposal_len: usize,
    pub pool_size: usize,
    /// Copy teacher backbone weights when architectures match.
    pub warm_start: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            clip: Some(1.0),
            cosine_decay: true,
            seed: 0,
            log_every: 50,
            ckpt_every: 0,
            loss: "ce".into(),
            proposal: "teacher".into(),
            beta_b: 1.0,
            split: "start".into(),
            proposal_len: 16,
            pool_size: 512,
            warm_start: false,
        }
    }
}

impl TrainingConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            clip: self.clip,
            cosine_decay: self.cosine_decay,
            seed: self.seed,
            log_every: self.log_every,
        }
    }

    pub fn distill_options(&self) -> Result<DistillOptions> {
        Ok(DistillOptions {
            train: self.train_options(),
            loss: LossKind::parse(&self.loss)?,
            proposal: ProposalKind::parse(&self.proposal)?,
            beta_b: self.beta_b,
            split: match self.split.as_str() {
                "start" => SplitPolicy::Start,
                "uniform" => SplitPolicy::Uniform,
                other => {
                    return Err(PtpError::InvalidConfig(format!(
                        "unknown split policy {other:?} (expected start or uniform)"
                    )))
                }
            },
            seq_len: self.proposal_len,
            pool_size: self.pool_size,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub trials: usize,
    pub max_tokens: usize,
    pub seed: u64,
    /// `empty`, `random`, or `both`.
    pub contexts: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_list: vec![1, 2, 4, 8, 16],
            m_list: vec![1, 4, 16],
            trials: 400,
            max_tokens: 64,
            seed: 1,
            contexts: "both".into(),
        }
    }
}

/// The full run configuration (one TOML file).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PtpError::Malformed {
            path: "<config>".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            PtpError::Malformed { reason, .. } => PtpError::Malformed {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Train/validation corpora plus the vocabulary they imply.
pub struct LoadedData {
    pub train: Vec<Vec<Token>>,
    pub val: Vec<Vec<Token>>,
    pub vocab: usize,
}

pub fn load_data(cfg: &DataConfig) -> Result<LoadedData> {
    let (corpus, vocab) = match cfg.source.as_str() {
        "synth" => (synth_generate(&cfg.synth_config())?, cfg.states),
        "file" => {
            if cfg.path.is_empty() {
                return Err(PtpError::InvalidConfig(
                    "data.source = \"file\" needs data.path".into(),
                ));
            }
            let corpus = load_token_file(Path::new(&cfg.path), None)?;
            if corpus.is_empty() {
                return Err(PtpError::InvalidInput(format!(
                    "token file {} holds no sequences",
                    cfg.path
                )));
            }
            let vocab = corpus
                .iter()
                .flat_map(|s| s.iter())
                .max()
                .map_or(0, |&m| m + 1);
            (corpus, vocab)
        }
        other => {
            return Err(PtpError::InvalidConfig(format!(
                "unknown data source {other:?} (expected synth or file)"
            )))
        }
    };
    let val_len = ((corpus.len() as f64) * cfg.val_fraction).round() as usize;
    let split = corpus.len().saturating_sub(val_len.max(1)).max(1);
    let (train, val) = corpus.split_at(split.min(corpus.len() - 1).max(1));
    Ok(LoadedData {
        train: train.to_vec(),
        val: val.to_vec(),
        vocab,
    })
}

/// Flat summary of a finished run; the export subcommand collates these.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// `teacher`, `distill`, `iat`, `mtp`, or `eval`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_correct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accepted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_sweep: Option<Vec<BestOfRow>>,
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut s = String::new();
    s.push_str(METRICS_VERSION);
    s.push('\n');
    s.push_str("step,loss,eval_mean_correct,perplexity\n");
    for r in rows {
        let ec = r
            .eval_mean_correct
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        let pp = r.perplexity.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!("{},{},{ec},{pp}\n", r.step, r.loss));
    }
    atomic_write(path, s.as_bytes())
}

fn write_run_snapshot(dir: &Path, cfg: &RunConfig, kind: &str) -> Result<()> {
    let snapshot = serde_json::json!({
        "kind": kind,
        "config": cfg,
    });
    atomic_write(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&snapshot).unwrap().as_bytes(),
    )
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    atomic_write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(summary).unwrap().as_bytes(),
    )
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| PtpError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads either a tabular table or a transformer teacher checkpoint as the
/// reference model for distillation/verification.
pub fn load_reference(path: &Path) -> Result<Box<dyn ArModel>> {
    ckpt::load_verifier(path)
}

/// Trains the autoregressive teacher and writes a run directory.
pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_run_snapshot(out, cfg, "teacher")?;
    let data = load_data(&cfg.data)?;
    let arch = cfg.teacher.arch(data.vocab);
    let shaping = cfg.teacher.shaping();
    let opts = cfg.training.train_options();

    // Step-0 checkpoint: the seeded initialization the run starts from.
    let init = TransformerLm::new(arch.clone(), opts.seed)?;
    ckpt::save_teacher(
        &out.join("ckpt-step0.ptpckpt"),
        &TransformerTeacher::new(init, shaping.clone())?,
    )?;

    let every = cfg.training.ckpt_every;
    let arch_for_hook = arch.clone();
    let shaping_for_hook = shaping.clone();
    let out_buf = out.to_path_buf();
    let mut hook = move |step: usize, params: &[f64]| -> Result<()> {
        if every > 0 && step % every == 0 && step > 0 {
            let lm = TransformerLm::from_params(arch_for_hook.clone(), params.to_vec())?;
            ckpt::save_teacher(
                &out_buf.join(format!("ckpt-{step:06}.ptpckpt")),
                &TransformerTeacher::new(lm, shaping_for_hook.clone())?,
            )?;
        }
        Ok(())
    };
    let (lm, mut log) = train::train_teacher_hooked(&data.train, arch, &opts, Some(&mut hook))?;
    let teacher = TransformerTeacher::new(lm, shaping)?;
    ckpt::save_teacher(&out.join("ckpt-final.ptpckpt"), &teacher)?;

    let perplexity = lm_nll(teacher.lm(), &data.val)?.exp();
    if let Some(last) = log.rows.last_mut() {
        last.perplexity = Some(perplexity);
    }
    write_metrics(&out.join("metrics.csv"), &log.rows)?;
    write_summary(
        out,
        &RunSummary {
            label: dir_label(out),
            kind: "teacher".into(),
            perplexity: Some(perplexity),
            ..Default::default()
        },
    )?;
    Ok(())
}

/// Mean window acceptance of a student against a verifier on empty contexts.
fn quick_eval(
    student: &dyn WindowDecoder,
    verifier: &dyn ArModel,
    window: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let eval = EvalSet::empty_contexts(trials, seed);
    let rows = restricted_n_sweep(student, verifier, &eval, &[window])?;
    Ok((rows[0].mean_correct, rows[0].mean_accepted))
}

fn distill_kind_label(variant: PtpVariant) -> &'static str {
    match variant {
        PtpVariant::Independent => "mtp",
        _ => "distill",
    }
}

/// Distills a PTP student (or the independent baseline) from a reference
/// model checkpoint and writes a run directory.
pub fn cmd_distill(cfg: &RunConfig, teacher_path: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let teacher = load_reference(teacher_path)?;
    let data = load_data(&cfg.data)?;
    if teacher.vocab() != data.vocab {
        return Err(PtpError::InvalidConfig(format!(
            "teacher vocabulary {} vs data vocabulary {}",
            teacher.vocab(),
            data.vocab
        )));
    }
    let ptp_cfg = cfg.student.ptp_config(teacher.vocab())?;
    write_run_snapshot(out, cfg, distill_kind_label(ptp_cfg.variant))?;
    let opts = cfg.training.distill_options()?;
    let mut student = PtpModel::new(ptp_cfg.clone(), opts.train.seed)?;
    if cfg.training.warm_start {
        let transformer = ckpt::load_teacher(teacher_path).map_err(|_| {
            PtpError::InvalidConfig("warm_start requires a transformer teacher checkpoint".into())
        })?;
        student.warm_start_from(transformer.lm(), opts.train.seed ^ 0xaa)?;
    }
    ckpt::save_ptp(&out.join("ckpt-step0.ptpckpt"), &student)?;

    let every = cfg.training.ckpt_every;
    let cfg_for_hook = ptp_cfg.clone();
    let out_buf = out.to_path_buf();
    let mut hook = move |step: usize, params: &[f64]| -> Result<()> {
        if every > 0 && step % every == 0 && step > 0 {
            let model = PtpModel::from_params(cfg_for_hook.clone(), params.to_vec())?;
            ckpt::save_ptp(&out_buf.join(format!("ckpt-{step:06}.ptpckpt")), &model)?;
        }
        Ok(())
    };
    let dataset = if opts.proposal == ProposalKind::Dataset {
        Some(&data.train[..])
    } else {
        None
    };
    let mut log =
        train::distill_train_hooked(&mut student, teacher.as_ref(), dataset, &opts, Some(&mut hook))?;
    ckpt::save_ptp(&out.join("ckpt-final.ptpckpt"), &student)?;

    let (mean_correct, mean_accepted) = quick_eval(
        &student,
        teacher.as_ref(),
        ptp_cfg.window,
        cfg.eval.trials,
        cfg.eval.seed,
    )?;
    if let Some(last) = log.rows.last_mut() {
        last.eval_mean_correct = Some(mean_correct);
    }
    write_metrics(&out.join("metrics.csv"), &log.rows)?;
    write_summary(
        out,
        &RunSummary {
            label: dir_label(out),
            kind: distill_kind_label(ptp_cfg.variant).into(),
            variant: Some(ptp_cfg.variant.name().into()),
            loss: Some(opts.loss.name().into()),
            proposal: Some(opts.proposal.name().into()),
            beta_b: Some(opts.beta_b),
            window: Some(ptp_cfg.window),
            mean_correct: Some(mean_correct),
            mean_accepted: Some(mean_accepted),
            ..Default::default()
        },
    )?;
    Ok(())
}

/// Trains a categorical PTP directly on data (no teacher) and writes a run
/// directory with its validation perplexity.
pub fn cmd_train_iat(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_run_snapshot(out, cfg, "iat")?;
    let data = load_data(&cfg.data)?;
    let ptp_cfg = cfg.student.ptp_config(data.vocab)?;
    if ptp_cfg.variant != PtpVariant::Categorical {
        return Err(PtpError::InvalidConfig(
            "inverse autoregressive training requires student.variant = \"categorical\"".into(),
        ));
    }
    let opts = cfg.training.distill_options()?;
    let mut model = PtpModel::new(ptp_cfg.clone(), opts.train.seed)?;
    ckpt::save_ptp(&out.join("ckpt-step0.ptpckpt"), &model)?;
    let every = cfg.training.ckpt_every;
    let cfg_for_hook = ptp_cfg.clone();
    let out_buf = out.to_path_buf();
    let mut hook = move |step: usize, params: &[f64]| -> Result<()> {
        if every > 0 && step % every == 0 && step > 0 {
            let m = PtpModel::from_params(cfg_for_hook.clone(), params.to_vec())?;
            ckpt::save_ptp(&out_buf.join(format!("ckpt-{step:06}.ptpckpt")), &m)?;
        }
        Ok(())
    };
    let mut log = train::train_iat_hooked(&mut model, &data.train, &opts, Some(&mut hook))?;
    ckpt::save_ptp(&out.join("ckpt-final.ptpckpt"), &model)?;

    let perplexity = iat_nll(&model, &data.val, cfg.eval.seed)?.exp();
    if let Some(last) = log.rows.last_mut() {
        last.perplexity = Some(perplexity);
    }
    write_metrics(&out.join("metrics.csv"), &log.rows)?;
    write_summary(
        out,
        &RunSummary {
            label: dir_label(out),
            kind: "iat".into(),
            variant: Some(ptp_cfg.variant.name().into()),
            beta_b: Some(opts.beta_b),
            window: Some(ptp_cfg.window),
            perplexity: Some(perplexity),
            ..Default::default()
        },
    )?;
    Ok(())
}

/// Random evaluation contexts: prefixes of freshly generated synthetic
/// sequences (lengths 1..=seq_len/2).
fn random_contexts(cfg: &RunConfig, trials: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
    use rand::{Rng, SeedableRng};
    let data = load_data(&cfg.data)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xc7a);
    let max_len = (cfg.data.seq_len / 2).max(1);
    Ok((0..trials)
        .map(|_| {
            let seq = &data.train[rng.random_range(0..data.train.len())];
            let len = rng.random_range(1..=max_len.min(seq.len()));
            seq[..len].to_vec()
        })
        .collect())
}

/// Evaluates a student checkpoint against a verifier: block-generation
/// report, restricted-window sweep, and best-of-M sweep, for empty and/or
/// random contexts.
pub fn cmd_eval(
    cfg: &RunConfig,
    student_path: &Path,
    verifier_path: &Path,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_run_snapshot(out, cfg, "eval")?;
    let student = ckpt::load_ptp(student_path)?;
    let verifier = load_reference(verifier_path)?;
    let window = student.config().window;
    let modes: Vec<&str> = match cfg.eval.contexts.as_str() {
        "empty" => vec!["empty"],
        "random" => vec!["random"],
        "both" => vec!["empty", "random"],
        other => {
            return Err(PtpError::InvalidConfig(format!(
                "unknown context mode {other:?} (expected empty, random, both)"
            )))
        }
    };
    let mut summary = RunSummary {
        label: dir_label(out),
        kind: "eval".into(),
        variant: Some(student.config().variant.name().into()),
        window: Some(window),
        ..Default::default()
    };
    for mode in modes {
        let contexts = match mode {
            "empty" => vec![Vec::new(); cfg.eval.trials],
            _ => random_contexts(cfg, cfg.eval.trials, cfg.eval.seed)?,
        };
        let eval = EvalSet {
            contexts,
            seed: cfg.eval.seed,
        };
        if !cfg.eval.n_list.is_empty() {
            let rows = restricted_n_sweep(&student, verifier.as_ref(), &eval, &cfg.eval.n_list)?;
            let mut csv = String::from("n,mean_correct,mean_accepted\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.n, r.mean_correct, r.mean_accepted));
            }
            atomic_write(&out.join(format!("n_sweep_{mode}.csv")), csv.as_bytes())?;
            if mode == "empty" {
                if let Some(full) = rows.iter().find(|r| r.n == window) {
                    summary.mean_correct = Some(full.mean_correct);
                    summary.mean_accepted = Some(full.mean_accepted);
                }
                summary.n_sweep = Some(rows);
            }
        }
        if !cfg.eval.m_list.is_empty() {
            let rows =
                best_of_m_sweep(&student, verifier.as_ref(), &eval, window, &cfg.eval.m_list)?;
            let mut csv = String::from("m,mean_correct,mean_accepted\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.m, r.mean_correct, r.mean_accepted));
            }
            atomic_write(&out.join(format!("m_sweep_{mode}.csv")), csv.as_bytes())?;
            if mode == "empty" {
                summary.m_sweep = Some(rows);
            }
        }
        // One seeded error-corrected generation run per mode.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.eval.seed ^ 0x9e0);
        let prompt: Vec<Token> = match mode {
            "empty" => Vec::new(),
            _ => random_contexts(cfg, 1, cfg.eval.seed)?.remove(0),
        };
        let (_, report, _) = generate_with_verification(
            &prompt,
            &student,
            verifier.as_ref(),
            window,
            cfg.eval.max_tokens,
            None,
            &mut rng,
        )?;
        atomic_write(
            &out.join(format!("report_{mode}.json")),
            report.to_json().as_bytes(),
        )?;
        atomic_write(
            &out.join(format!("report_{mode}.csv")),
            report.to_csv().as_bytes(),
        )?;
    }
    write_summary(out, &summary)?;
    Ok(())
}

/// Two-token compatibility maps for a student, the verifier-oracle, and an
/// optional independent baseline, with their incompatible-area rates.
pub fn cmd_demo_pairs(
    student_path: &Path,
    baseline_path: Option<&Path>,
    verifier_path: &Path,
    resolution: usize,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let student = ckpt::load_ptp(student_path)?;
    let verifier = load_reference(verifier_path)?;
    let predicate = VerifierSupport::new(verifier.as_ref(), vec![]);

    let mut rates = serde_json::Map::new();
    let student_map = pair_region_map(&student, &[], resolution, &predicate)?;
    atomic_write(&out.join("pairs_student.csv"), student_map.to_csv().as_bytes())?;
    rates.insert("student".into(), student_map.incompatible_rate().into());

    let oracle = OracleDecoder::new(verifier.as_ref());
    let oracle_map = pair_region_map(&oracle, &[], resolution, &predicate)?;
    atomic_write(&out.join("pairs_oracle.csv"), oracle_map.to_csv().as_bytes())?;
    rates.insert("oracle".into(), oracle_map.incompatible_rate().into());

    if let Some(path) = baseline_path {
        let baseline = ckpt::load_ptp(path)?;
        let map = pair_region_map(&baseline, &[], resolution, &predicate)?;
        atomic_write(&out.join("pairs_baseline.csv"), map.to_csv().as_bytes())?;
        rates.insert("baseline".into(), map.incompatible_rate().into());
    }
    atomic_write(
        &out.join("pairs_summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(rates))
            .unwrap()
            .as_bytes(),
    )?;
    Ok(())
}

/// Generates the synthetic corpus to a token file.
pub fn cmd_gen_data(cfg: &RunConfig, out_file: &Path) -> Result<()> {
    let corpus = synth_generate(&cfg.data.synth_config())?;
    crate::harness::save_token_file(out_file, &corpus)
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Collates run summaries into per-table CSVs: perplexity pairs, the
/// proposal-by-loss grid, variant acceptance, the Beta-shape ablation, and
/// the best-of-M / restricted-window sweeps.
pub fn cmd_export(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut summaries = Vec::new();
    for dir in run_dirs {
        summaries.push(read_summary(dir)?);
    }

    // Perplexity per model (teacher / iat runs).
    let mut t1 = String::from("model,perplexity\n");
    for s in summaries.iter().filter(|s| s.perplexity.is_some()) {
        t1.push_str(&format!("{},{}\n", s.label, csv_cell(s.perplexity)));
    }
    atomic_write(&out.join("table1_perplexity.csv"), t1.as_bytes())?;

    // Proposal x loss grid of mean correct tokens (distilled students),
    // with the independent baseline as its own column.
    let losses = ["kl", "kl_rev", "bce", "ce"];
    let mut t2 = String::from("proposal,kl,kl_rev,bce,ce,mtp\n");
    for proposal in ["teacher", "student", "dataset"] {
        let mut row = vec![proposal.to_string()];
        for loss in losses {
            let cell = summaries
                .iter()
                .find(|s| {
                    s.kind == "distill"
                        && s.proposal.as_deref() == Some(proposal)
                        && s.loss.as_deref() == Some(loss)
                })
                .and_then(|s| s.mean_correct);
            row.push(csv_cell(cell));
        }
        let mtp = summaries
            .iter()
            .find(|s| s.kind == "mtp" && s.proposal.as_deref() == Some(proposal))
            .and_then(|s| s.mean_correct);
        row.push(csv_cell(mtp));
        t2.push_str(&row.join(","));
        t2.push('\n');
    }
    atomic_write(&out.join("table2_losses.csv"), t2.as_bytes())?;

    // Accepted tokens per parallelization technique.
    let mut t3 = String::from("technique,mean_accepted\n");
    for s in &summaries {
        if let Some(acc) = s.mean_accepted {
            if s.kind == "distill" || s.kind == "mtp" {
                t3.push_str(&format!("{},{acc}\n", s.label));
            }
        }
    }
    atomic_write(&out.join("table3_variants.csv"), t3.as_bytes())?;

    // Beta-shape ablation: rows b, columns variant.
    let mut bs: Vec<f64> = summaries
        .iter()
        .filter(|s| s.kind == "distill" || s.kind == "mtp")
        .filter_map(|s| s.beta_b)
        .collect();
    bs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bs.dedup();
    let mut t4 = String::from("b,one_hot,categorical,independent\n");
    for b in bs {
        let cell = |variant: &str| {
            summaries
                .iter()
                .find(|s| {
                    s.beta_b == Some(b)
                        && s.variant.as_deref() == Some(variant)
                        && (s.kind == "distill" || s.kind == "mtp")
                })
                .and_then(|s| s.mean_correct)
        };
        t4.push_str(&format!(
            "{b},{},{},{}\n",
            csv_cell(cell("one_hot")),
            csv_cell(cell("categorical")),
            csv_cell(cell("independent"))
        ));
    }
    atomic_write(&out.join("table4_beta.csv"), t4.as_bytes())?;

    // Best-of-M and restricted-window sweeps from eval runs.
    let mut t6 = String::from("label,m,mean_correct,mean_accepted\n");
    let mut t7 = String::from("label,n,mean_correct,mean_accepted\n");
    for s in &summaries {
        if let Some(rows) = &s.m_sweep {
            for r in rows {
                t6.push_str(&format!(
                    "{},{},{},{}\n",
                    s.label, r.m, r.mean_correct, r.mean_accepted
                ));
            }
        }
        if let Some(rows) = &s.n_sweep {
            for r in rows {
                t7.push_str(&format!(
                    "{},{},{},{}\n",
                    s.label, r.n, r.mean_correct, r.mean_accepted
                ));
            }
        }
    }
    atomic_write(&out.join("table6_best_of_m.csv"), t6.as_bytes())?;
    atomic_write(&out.join("table7_n_sweep.csv"), t7.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.data.states, cfg.data.states);
        assert_eq!(back.student.variant, cfg.student.variant);
        assert_eq!(back.eval.n_list, cfg.eval.n_list);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            [data]
            states = 6
            [training]
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.states, 6);
        assert_eq!(cfg.training.steps, 10);
        assert_eq!(cfg.training.batch_size, 32);
    }

    #[test]
    fn bad_toml_is_rejected() {
        assert!(RunConfig::from_toml("data = 3").is_err());
    }

    #[test]
    fn load_data_splits_train_and_val() {
        let cfg = DataConfig {
            corpus_size: 50,
            states: 4,
            seq_len: 6,
            val_fraction: 0.2,
            ..Default::default()
        };
        let data = load_data(&cfg).unwrap();
        assert_eq!(data.vocab, 4);
        assert_eq!(data.train.len() + data.val.len(), 50);
        assert_eq!(data.val.len(), 10);
    }

    #[test]
    fn metrics_file_has_versioned_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(
            &path,
            &[MetricRow {
                step: 0,
                loss: 1.5,
                eval_mean_correct: None,
                perplexity: Some(3.0),
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_VERSION));
        assert_eq!(lines.next(), Some("step,loss,eval_mean_correct,perplexity"));
        assert_eq!(lines.next(), Some("0,1.5,,3"));
    }
}
