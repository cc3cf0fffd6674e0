//! Error-corrected block generation and its accounting.
//!
//! Each step drafts a window of tokens from the student in one call, replays
//! the same auxiliary values through the verifier's batched distributions,
//! accepts the longest matching prefix plus one corrected token, and
//! advances. The emitted sequence is — token for token — the verifier's own
//! sequential sample under the accepted auxiliary stream, no matter how good
//! or bad the student is; the student only controls how many tokens each
//! step accepts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PtpError, Result};
use crate::model::WindowDecoder;
use crate::sampling::{AuxStream, AuxValue, Categorical};
use crate::teacher::ArModel;
use crate::Token;

/// Longest matching prefix plus the corrected token, capped at the window.
///
/// Returns `(#correct, #accepted)` with `#accepted = min(#correct + 1, n)`.
pub fn count_correct(student: &[Token], verifier: &[Token], n: usize) -> Result<(usize, usize)> {
    if student.len() != n || verifier.len() != n {
        return Err(PtpError::InvalidInput(format!(
            "window mismatch: student {}, verifier {}, n {n}",
            student.len(),
            verifier.len()
        )));
    }
    let correct = student
        .iter()
        .zip(verifier)
        .take_while(|(s, v)| s == v)
        .count();
    Ok((correct, (correct + 1).min(n)))
}

/// Per-step acceptance record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index (within the generated continuation) of the window's first token.
    pub start: usize,
    pub correct: usize,
    pub accepted: usize,
}

/// Acceptance accounting for one generation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeReport {
    pub schema: String,
    pub window: usize,
    pub steps: Vec<StepRecord>,
    pub tokens_emitted: usize,
    pub student_calls: usize,
    pub verifier_calls: usize,
    /// Naive equal-cost estimate: mean accepted tokens per two model calls.
    pub speedup_estimate: f64,
}

pub const DECODE_REPORT_SCHEMA: &str = "ptp-decode-report-v1";

impl DecodeReport {
    fn new(window: usize) -> Self {
        Self {
            schema: DECODE_REPORT_SCHEMA.into(),
            window,
            steps: Vec::new(),
            tokens_emitted: 0,
            student_calls: 0,
            verifier_calls: 0,
            speedup_estimate: 0.0,
        }
    }

    pub fn mean_accepted(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.accepted as f64).sum::<f64>() / self.steps.len() as f64
    }

    pub fn mean_correct(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.correct as f64).sum::<f64>() / self.steps.len() as f64
    }

    /// Internal consistency: every step emits at least one token, acceptance
    /// never exceeds the window, `accepted == min(correct + 1, window)` (a
    /// terminal step truncated by the token limit or EOS may accept fewer),
    /// and emitted tokens add up.
    pub fn check_invariants(&self) -> Result<()> {
        let mut emitted = 0usize;
        for (i, s) in self.steps.iter().enumerate() {
            let terminal = i + 1 == self.steps.len();
            if s.accepted == 0 || s.accepted > self.window {
                return Err(PtpError::InvalidInput(format!(
                    "step {i}: accepted {} outside 1..={}",
                    s.accepted, self.window
                )));
            }
            let nominal = (s.correct + 1).min(self.window);
            if s.accepted > nominal || (!terminal && s.accepted != nominal) {
                return Err(PtpError::InvalidInput(format!(
                    "step {i}: accepted {} vs min(correct + 1, window) = {nominal}",
                    s.accepted
                )));
            }
            if s.start != emitted {
                return Err(PtpError::InvalidInput(format!(
                    "step {i}: start {} but {emitted} tokens emitted so far",
                    s.start
                )));
            }
            emitted += s.accepted;
        }
        if emitted != self.tokens_emitted {
            return Err(PtpError::InvalidInput(format!(
                "emitted {} but steps account for {emitted}",
                self.tokens_emitted
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| PtpError::Malformed {
            path: "<decode report>".into(),
            reason: e.to_string(),
        })?;
        if report.schema != DECODE_REPORT_SCHEMA {
            return Err(PtpError::Malformed {
                path: "<decode report>".into(),
                reason: format!("unknown schema {:?}", report.schema),
            });
        }
        Ok(report)
    }

    /// Per-step CSV with a fixed header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,start,correct,accepted\n");
        for (i, r) in self.steps.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{}\n", r.start, r.correct, r.accepted));
        }
        s
    }
}

/// Wall-time speedup estimate for a report under a student/verifier cost
/// ratio: `mean(#accepted) / (1 + ratio)`. Equal sizes (`ratio = 1`) give
/// the naive two-calls-per-step estimate.
pub fn speedup_estimate(report: &DecodeReport, cost_ratio: f64) -> Result<f64> {
    if report.steps.is_empty() {
        return Err(PtpError::InvalidInput("empty report".into()));
    }
    if !(cost_ratio >= 0.0) || !cost_ratio.is_finite() {
        return Err(PtpError::InvalidParameter(format!(
            "cost ratio {cost_ratio} must be finite and nonnegative"
        )));
    }
    Ok(report.mean_accepted() / (1.0 + cost_ratio))
}

/// Error-corrected block generation.
///
/// Per step: draw fresh auxiliaries for the window, draft the window from the
/// student in one call, replay the same auxiliaries through the verifier's
/// batched rows, accept the matching prefix plus one corrected token, and
/// extend the context. Stops at `max_tokens` (truncating the final window to
/// the remaining budget) or when an accepted token equals `eos`.
///
/// Returns the generated continuation, the acceptance report, and the
/// accepted auxiliary stream — the continuation equals the verifier's
/// sequential sample under that stream, bitwise.
pub fn generate_with_verification<R: Rng + ?Sized>(
    prompt: &[Token],
    student: &dyn WindowDecoder,
    verifier: &dyn ArModel,
    window: usize,
    max_tokens: usize,
    eos: Option<Token>,
    rng: &mut R,
) -> Result<(Vec<Token>, DecodeReport, AuxStream)> {
    if window == 0 {
        return Err(PtpError::InvalidParameter("window must be >= 1".into()));
    }
    if max_tokens == 0 {
        return Err(PtpError::InvalidParameter("max_tokens must be >= 1".into()));
    }
    if let Some(limit) = verifier.max_context() {
        if prompt.len() + max_tokens + 1 > limit {
            return Err(PtpError::InvalidInput(format!(
                "prompt {} + max_tokens {max_tokens} exceeds the verifier context {limit}",
                prompt.len()
            )));
        }
    }
    let mut generated: Vec<Token> = Vec::with_capacity(max_tokens);
    let mut accepted_aux = AuxStream::default();
    let mut report = DecodeReport::new(window);
    while generated.len() < max_tokens {
        let n = window.min(max_tokens - generated.len());
        let mut context = prompt.to_vec();
        context.extend_from_slice(&generated);
        let aux = AuxStream::uniform(n, rng);

        let drafted = student.decode_window(&context, aux.values())?;
        report.student_calls += 1;
        if drafted.len() != n {
            return Err(PtpError::InvalidInput(format!(
                "student drafted {} tokens for a window of {n}",
                drafted.len()
            )));
        }
        let dists = verifier.batch_dists(&context, &drafted)?;
        report.verifier_calls += 1;
        let verified: Vec<Token> = dists
            .iter()
            .zip(aux.values())
            .map(|(d, u)| d.pick(u.as_f64()))
            .collect();
        let (correct, accepted) = count_correct(&drafted, &verified, n)?;

        let mut take = accepted;
        let mut hit_eos = false;
        if let Some(eos) = eos {
            if let Some(j) = verified[..accepted].iter().position(|&t| t == eos) {
                take = j + 1;
                hit_eos = true;
            }
        }
        report.steps.push(StepRecord {
            start: generated.len(),
            correct: correct.min(take),
            accepted: take,
        });
        generated.extend_from_slice(&verified[..take]);
        accepted_aux.extend_from(&aux.values()[..take]);
        report.tokens_emitted += take;
        if hit_eos {
            break;
        }
    }
    report.speedup_estimate = report.mean_accepted() / 2.0;
    report.check_invariants()?;
    Ok((generated, report, accepted_aux))
}

/// One drafted window: the auxiliary stream that produced it and the tokens.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub aux: AuxStream,
    pub tokens: Vec<Token>,
}

/// Independent candidate windows for one fixed context.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub context: Vec<Token>,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(PtpError::InvalidInput("empty candidate set".into()));
        }
        let n = self.candidates[0].tokens.len();
        for c in &self.candidates {
            if c.tokens.len() != n || c.aux.len() != n {
                return Err(PtpError::InvalidInput(
                    "candidates must share one window size".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Centrality score of one candidate under the verifier's rows: the summed
/// distance of each auxiliary's relative position in its token's interval
/// from the interval center. Lower is better; a token the verifier gives
/// zero mass scores infinite.
fn centrality_score(candidate: &Candidate, dists: &[Categorical]) -> f64 {
    let mut score = 0.0;
    for (k, (&token, dist)) in candidate.tokens.iter().zip(dists).enumerate() {
        let hi = dist.cdf()[token];
        let lo = dist.cdf_below(token);
        let width = hi - lo;
        if !(width > 0.0) {
            return f64::INFINITY;
        }
        let u = candidate.aux[k].as_f64();
        let rel = (hi - u) / width;
        score += (rel - 0.5).abs();
    }
    score
}

/// Picks the candidate whose auxiliaries sit closest to the centers of their
/// verifier intervals. Unbiased for the token marginals: the choice depends
/// only on the auxiliaries' positions within their intervals, never on which
/// tokens they select. Ties break toward the lowest index.
pub fn select_best_of_m(set: &CandidateSet, verifier_dists: &[Vec<Categorical>]) -> Result<usize> {
    set.validate()?;
    if verifier_dists.len() != set.candidates.len() {
        return Err(PtpError::InvalidInput(format!(
            "{} distribution rows for {} candidates",
            verifier_dists.len(),
            set.candidates.len()
        )));
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (m, (candidate, dists)) in set.candidates.iter().zip(verifier_dists).enumerate() {
        let score = centrality_score(candidate, dists);
        if score < best_score {
            best = m;
            best_score = score;
        }
    }
    Ok(best)
}

/// Evaluation inputs: one trial per context (contexts may repeat or be
/// empty), with derived per-trial random streams.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub contexts: Vec<Vec<Token>>,
    pub seed: u64,
}

impl EvalSet {
    pub fn empty_contexts(trials: usize, seed: u64) -> Self {
        Self {
            contexts: vec![Vec::new(); trials],
            seed,
        }
    }

    pub(crate) fn trial_rng(&self, trial: usize) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(
            self.seed ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )
    }
}

/// Mean (#correct, #accepted) per window size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub mean_correct: f64,
    pub mean_accepted: f64,
}

/// Single-window acceptance sweep over restricted window sizes.
///
/// Every trial draws one auxiliary stream of `max(n_list)` values and reuses
/// its prefixes across the whole list, so the per-trial counts — and hence
/// the means — are nondecreasing in `n` by construction.
pub fn restricted_n_sweep(
    student: &dyn WindowDecoder,
    verifier: &dyn ArModel,
    eval: &EvalSet,
    n_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if n_list.is_empty() || eval.contexts.is_empty() {
        return Err(PtpError::InvalidInput("empty sweep".into()));
    }
    let n_max = *n_list.iter().max().unwrap();
    let mut totals = vec![(0usize, 0usize); n_list.len()];
    for (trial, context) in eval.contexts.iter().enumerate() {
        let mut rng = eval.trial_rng(trial);
        let aux = AuxStream::uniform(n_max, &mut rng);
        for (slot, &n) in n_list.iter().enumerate() {
            let prefix = &aux.values()[..n];
            let drafted = student.decode_window(context, prefix)?;
            let dists = verifier.batch_dists(context, &drafted)?;
            let verified: Vec<Token> = dists
                .iter()
                .zip(prefix)
                .map(|(d, u)| d.pick(u.as_f64()))
                .collect();
            let (c, a) = count_correct(&drafted, &verified, n)?;
            totals[slot].0 += c;
            totals[slot].1 += a;
        }
    }
    let trials = eval.contexts.len() as f64;
    Ok(n_list
        .iter()
        .zip(&totals)
        .map(|(&n, &(c, a))| SweepRow {
            n,
            mean_correct: c as f64 / trials,
            mean_accepted: a as f64 / trials,
        })
        .collect())
}

/// Mean (#correct, #accepted) of the selected candidate per candidate count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestOfRow {
    pub m: usize,
    pub mean_correct: f64,
    pub mean_accepted: f64,
}

/// Best-of-M sweep at a fixed window: every trial draws `max(m_list)`
/// candidate streams and each `m` selects among the first `m` of them
/// (paired seeds across the list).
pub fn best_of_m_sweep(
    student: &dyn WindowDecoder,
    verifier: &dyn ArModel,
    eval: &EvalSet,
    window: usize,
    m_list: &[usize],
) -> Result<Vec<BestOfRow>> {
    if m_list.is_empty() || eval.contexts.is_empty() {
        return Err(PtpError::InvalidInput("empty sweep".into()));
    }
    let m_max = *m_list.iter().max().unwrap();
    let mut totals = vec![(0usize, 0usize); m_list.len()];
    for (trial, context) in eval.contexts.iter().enumerate() {
        let mut rng = eval.trial_rng(trial);
        let mut candidates = Vec::with_capacity(m_max);
        let mut dists = Vec::with_capacity(m_max);
        let mut verified = Vec::with_capacity(m_max);
        for _ in 0..m_max {
            let aux = AuxStream::uniform(window, &mut rng);
            let tokens = student.decode_window(context, aux.values())?;
            let rows = verifier.batch_dists(context, &tokens)?;
            let v: Vec<Token> = rows
                .iter()
                .zip(aux.values())
                .map(|(d, u)| d.pick(u.as_f64()))
                .collect();
            candidates.push(Candidate { aux, tokens });
            dists.push(rows);
            verified.push(v);
        }
        for (slot, &m) in m_list.iter().enumerate() {
            let set = CandidateSet {
                context: context.clone(),
                candidates: candidates[..m].to_vec(),
            };
            let chosen = select_best_of_m(&set, &dists[..m])?;
            let (c, a) = count_correct(
                &set.candidates[chosen].tokens,
                &verified[chosen],
                window,
            )?;
            totals[slot].0 += c;
            totals[slot].1 += a;
        }
    }
    let trials = eval.contexts.len() as f64;
    Ok(m_list
        .iter()
        .zip(&totals)
        .map(|(&m, &(c, a))| BestOfRow {
            m,
            mean_correct: c as f64 / trials,
            mean_accepted: a as f64 / trials,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{sequential_sample, OracleDecoder, TabularTeacher};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> TabularTeacher {
        TabularTeacher::order1(
            Categorical::from_probs(&[0.5, 0.3, 0.2]).unwrap(),
            vec![
                Categorical::from_probs(&[0.6, 0.2, 0.2]).unwrap(),
                Categorical::from_probs(&[0.1, 0.8, 0.1]).unwrap(),
                Categorical::from_probs(&[0.3, 0.3, 0.4]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn count_correct_full_match() {
        assert_eq!(count_correct(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5], 5).unwrap(), (5, 5));
    }

    #[test]
    fn count_correct_first_token_differs() {
        assert_eq!(count_correct(&[9, 2], &[1, 2], 2).unwrap(), (0, 1));
    }

    #[test]
    fn count_correct_window_one() {
        assert_eq!(count_correct(&[3], &[3], 1).unwrap(), (1, 1));
        assert_eq!(count_correct(&[3], &[4], 1).unwrap(), (0, 1));
        assert!(count_correct(&[3, 1], &[3], 2).is_err());
    }

    #[test]
    fn oracle_student_accepts_full_windows() {
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tokens, report, _) =
            generate_with_verification(&[0], &oracle, &chain, 4, 16, None, &mut rng).unwrap();
        assert_eq!(tokens.len(), 16);
        assert!(report.steps.iter().all(|s| s.correct == 4 && s.accepted == 4));
        assert_eq!(report.steps.len(), 4);
        report.check_invariants().unwrap();
        assert!((report.speedup_estimate - 2.0).abs() < 1e-12);
    }

    /// A deliberately wrong student: always drafts token 0.
    struct ZeroStudent;
    impl WindowDecoder for ZeroStudent {
        fn decode_window(&self, _context: &[Token], aux: &[AuxValue]) -> crate::Result<Vec<Token>> {
            Ok(vec![0; aux.len()])
        }
    }

    #[test]
    fn any_student_output_is_the_verifier_sequential_sample() {
        let chain = chain3();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tokens, report, aux) =
                generate_with_verification(&[1], &ZeroStudent, &chain, 5, 12, None, &mut rng)
                    .unwrap();
            report.check_invariants().unwrap();
            let replay = sequential_sample(&chain, &[1], aux.values(), tokens.len()).unwrap();
            assert_eq!(tokens, replay, "seed {seed}");
            assert!(report.steps.iter().all(|s| s.accepted >= 1));
        }
    }

    #[test]
    fn max_tokens_truncates_final_window() {
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tokens, report, _) =
            generate_with_verification(&[], &oracle, &chain, 5, 7, None, &mut rng).unwrap();
        assert_eq!(tokens.len(), 7);
        assert_eq!(report.steps.len(), 2);
        assert_eq!(report.steps[1].accepted, 2);
        report.check_invariants().unwrap();
    }

    #[test]
    fn eos_from_verifier_stops_generation() {
        // Token 2 as EOS: generation must stop at the first accepted 2 and
        // the emitted suffix must still replay exactly.
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (tokens, report, aux) =
            generate_with_verification(&[], &oracle, &chain, 4, 40, Some(2), &mut rng).unwrap();
        assert!(tokens.len() < 40);
        assert_eq!(*tokens.last().unwrap(), 2);
        assert_eq!(tokens.iter().filter(|&&t| t == 2).count(), 1);
        let replay = sequential_sample(&chain, &[], aux.values(), tokens.len()).unwrap();
        assert_eq!(tokens, replay);
        report.check_invariants().unwrap();
    }

    #[test]
    fn unverified_student_eos_does_not_stop() {
        // The student drafts EOS constantly; as long as the verifier does not
        // accept it, generation continues to the budget.
        struct EosSpammer;
        impl WindowDecoder for EosSpammer {
            fn decode_window(&self, _c: &[Token], aux: &[AuxValue]) -> crate::Result<Vec<Token>> {
                Ok(vec![1; aux.len()])
            }
        }
        // The verifier never emits token 1, so the drafted EOS is always
        // rejected and every step accepts exactly one corrected token 0.
        let one_hot = Categorical::from_probs(&[1.0, 0.0]).unwrap();
        let chain =
            TabularTeacher::order1(one_hot.clone(), vec![one_hot.clone(), one_hot]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tokens, report, _) =
            generate_with_verification(&[], &EosSpammer, &chain, 3, 9, Some(1), &mut rng).unwrap();
        assert_eq!(tokens.len(), 9);
        assert!(tokens.iter().all(|&t| t == 0));
        assert!(report.steps.iter().all(|s| s.correct == 0 && s.accepted == 1));
    }

    #[test]
    fn speedup_estimates() {
        let mut report = DecodeReport::new(8);
        for i in 0..4 {
            report.steps.push(StepRecord {
                start: i * 4,
                correct: 3,
                accepted: 4,
            });
        }
        report.tokens_emitted = 16;
        assert_eq!(speedup_estimate(&report, 1.0).unwrap(), 2.0);
        assert_eq!(speedup_estimate(&report, 0.0).unwrap(), 4.0);
        let empty = DecodeReport::new(8);
        assert!(speedup_estimate(&empty, 1.0).is_err());

        let mut useless = DecodeReport::new(8);
        useless.steps.push(StepRecord {
            start: 0,
            correct: 0,
            accepted: 1,
        });
        assert_eq!(speedup_estimate(&useless, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn report_json_roundtrip() {
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, report, _) =
            generate_with_verification(&[], &oracle, &chain, 3, 9, None, &mut rng).unwrap();
        let back = DecodeReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back.steps, report.steps);
        assert_eq!(back.tokens_emitted, report.tokens_emitted);
        assert!(DecodeReport::from_json("{}").is_err());
        let csv = report.to_csv();
        assert!(csv.starts_with("step,start,correct,accepted\n"));
        assert_eq!(csv.lines().count(), 1 + report.steps.len());
    }

    #[test]
    fn best_of_one_returns_only_candidate() {
        let chain = chain3();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let aux = AuxStream::uniform(3, &mut rng);
        let tokens = sequential_sample(&chain, &[], aux.values(), 3).unwrap();
        let dists = chain.batch_dists(&[], &tokens).unwrap();
        let set = CandidateSet {
            context: vec![],
            candidates: vec![Candidate { aux, tokens }],
        };
        assert_eq!(select_best_of_m(&set, &[dists]).unwrap(), 0);
    }

    #[test]
    fn midpoint_candidate_wins() {
        let chain = chain3();
        // Candidate 0: auxiliaries at arbitrary positions. Candidate 1: every
        // auxiliary exactly at its token's interval midpoint.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let aux0 = AuxStream::uniform(3, &mut rng);
        let tokens0 = sequential_sample(&chain, &[], aux0.values(), 3).unwrap();
        let dists0 = chain.batch_dists(&[], &tokens0).unwrap();

        let tokens1 = vec![0, 1, 1];
        let dists1 = chain.batch_dists(&[], &tokens1).unwrap();
        let mut centered = Vec::new();
        for (k, &t) in tokens1.iter().enumerate() {
            let iv = dists1[k].compatible_interval(t).unwrap();
            centered.push(AuxValue::new(iv.midpoint() as f32).unwrap());
        }
        let set = CandidateSet {
            context: vec![],
            candidates: vec![
                Candidate {
                    aux: aux0,
                    tokens: tokens0,
                },
                Candidate {
                    aux: AuxStream::new(centered),
                    tokens: tokens1,
                },
            ],
        };
        assert_eq!(select_best_of_m(&set, &[dists0, dists1]).unwrap(), 1);
    }

    #[test]
    fn n_sweep_monotone_with_exact_one_at_window_one() {
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let eval = EvalSet::empty_contexts(200, 40);
        let rows = restricted_n_sweep(&oracle, &chain, &eval, &[1, 2, 4, 8]).unwrap();
        assert_eq!(rows[0].mean_accepted, 1.0);
        assert_eq!(rows[0].mean_correct, 1.0); // oracle student
        for w in rows.windows(2) {
            assert!(w[1].mean_accepted >= w[0].mean_accepted);
            assert!(w[1].mean_correct >= w[0].mean_correct);
        }
    }

    #[test]
    fn n_sweep_monotone_for_imperfect_student() {
        let chain = chain3();
        let eval = EvalSet::empty_contexts(300, 41);
        let rows = restricted_n_sweep(&ZeroStudent, &chain, &eval, &[1, 2, 4]).unwrap();
        assert_eq!(rows[0].mean_accepted, 1.0);
        for w in rows.windows(2) {
            assert!(w[1].mean_accepted >= w[0].mean_accepted);
            assert!(w[1].mean_correct >= w[0].mean_correct);
        }
    }

    #[test]
    fn best_of_m_first_token_marginal_is_unbiased() {
        // Selection by interval centrality must not bias which token the
        // chosen candidate starts with.
        let chain = chain3();
        let oracle = OracleDecoder::new(&chain);
        let trials = 30_000;
        let eval = EvalSet::empty_contexts(trials, 42);
        let window = 3;
        let m = 4;
        let mut counts = vec![0usize; 3];
        for trial in 0..trials {
            let mut rng = eval.trial_rng(trial);
            let mut candidates = Vec::new();
            let mut dists = Vec::new();
            for _ in 0..m {
                let aux = AuxStream::uniform(window, &mut rng);
                let tokens = oracle.decode_window(&[], aux.values()).unwrap();
                let rows = chain.batch_dists(&[], &tokens).unwrap();
                candidates.push(Candidate { aux, tokens });
                dists.push(rows);
            }
            let set = CandidateSet {
                context: vec![],
                candidates,
            };
            let chosen = select_best_of_m(&set, &dists).unwrap();
            counts[set.candidates[chosen].tokens[0]] += 1;
        }
        let truth = chain.initial().probs();
        for (j, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - truth[j]).abs() < 0.02,
                "token {j}: freq {freq} vs {}",
                truth[j]
            );
        }
    }
}
