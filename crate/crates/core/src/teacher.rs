//! Reference autoregressive models.
//!
//! Two implementations of [`ArModel`]: an exact tabular Markov model used as
//! a synthetic-data generator and oracle in tests, and a trained transformer.
//! Both expose the per-position distribution of a whole sequence in one
//! batched call, which is what block verification runs on.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{PtpError, Result};
use crate::model::{TransformerLm, WindowDecoder};
use crate::sampling::{AuxValue, Categorical, ShapingParams};
use crate::Token;

/// An autoregressive token model: a distribution over the next token given
/// any (possibly empty) context.
pub trait ArModel: Sync {
    fn vocab(&self) -> usize;

    /// Final (already shaped) distribution of the next token.
    fn next_token_dist(&self, context: &[Token]) -> Result<Categorical>;

    /// Distribution of `tokens[k]` given `context ++ tokens[..k]`, for every
    /// `k`, computed in a single batched evaluation. Must agree exactly with
    /// per-position [`next_token_dist`](Self::next_token_dist) calls.
    fn batch_dists(&self, context: &[Token], tokens: &[Token]) -> Result<Vec<Categorical>> {
        tokens
            .iter()
            .scan(context.to_vec(), |ctx, &t| {
                let dist = self.next_token_dist(ctx);
                ctx.push(t);
                Some(dist)
            })
            .collect()
    }

    /// Longest input (context plus continuation) the model accepts, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }
}

/// Deterministic sequential sampling: iterate `next_token_dist` and `pick`
/// with the provided auxiliary stream. The unique token sequence a model
/// produces under those auxiliaries.
pub fn sequential_sample(
    model: &dyn ArModel,
    context: &[Token],
    aux: &[AuxValue],
    n: usize,
) -> Result<Vec<Token>> {
    if aux.len() < n {
        return Err(PtpError::InvalidInput(format!(
            "auxiliary stream has {} values, need {n}",
            aux.len()
        )));
    }
    let mut seq = context.to_vec();
    let mut out = Vec::with_capacity(n);
    for u in aux.iter().take(n) {
        let dist = model.next_token_dist(&seq)?;
        let t = dist.pick(u.as_f64());
        seq.push(t);
        out.push(t);
    }
    Ok(out)
}

/// Wraps any autoregressive model as a window decoder that drafts exactly
/// the model's own sequential sample. The perfect student: every drafted
/// token survives verification against the same model.
pub struct OracleDecoder<'a> {
    model: &'a dyn ArModel,
}

impl<'a> OracleDecoder<'a> {
    pub fn new(model: &'a dyn ArModel) -> Self {
        Self { model }
    }
}

impl WindowDecoder for OracleDecoder<'_> {
    fn decode_window(&self, context: &[Token], aux: &[AuxValue]) -> Result<Vec<Token>> {
        sequential_sample(self.model, context, aux, aux.len())
    }
}

/// An exact low-order Markov model: a distribution for the empty context and
/// a table of rows keyed by the last `order` tokens.
///
/// Shorter keys may be present for contexts shorter than `order`; lookup uses
/// the longest available suffix.
#[derive(Debug, Clone)]
pub struct TabularTeacher {
    order: usize,
    vocab: usize,
    initial: Categorical,
    table: HashMap<Vec<Token>, Categorical>,
}

impl TabularTeacher {
    pub fn new(
        order: usize,
        vocab: usize,
        initial: Categorical,
        table: HashMap<Vec<Token>, Categorical>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(PtpError::InvalidConfig("order must be >= 1".into()));
        }
        if initial.len() != vocab {
            return Err(PtpError::InvalidConfig(format!(
                "initial row has {} entries, vocab is {vocab}",
                initial.len()
            )));
        }
        for (key, row) in &table {
            if key.is_empty() || key.len() > order {
                return Err(PtpError::InvalidConfig(format!(
                    "context key {key:?} has length outside 1..={order}"
                )));
            }
            if row.len() != vocab {
                return Err(PtpError::InvalidConfig(format!(
                    "row for {key:?} has {} entries, vocab is {vocab}",
                    row.len()
                )));
            }
            if key.iter().any(|&t| t >= vocab) {
                return Err(PtpError::InvalidConfig(format!(
                    "context key {key:?} contains out-of-vocabulary tokens"
                )));
            }
        }
        Ok(Self {
            order,
            vocab,
            initial,
            table,
        })
    }

    /// Order-1 chain from an initial distribution and one row per state.
    pub fn order1(initial: Categorical, rows: Vec<Categorical>) -> Result<Self> {
        let vocab = initial.len();
        if rows.len() != vocab {
            return Err(PtpError::InvalidConfig(format!(
                "{} rows for vocab {vocab}",
                rows.len()
            )));
        }
        let table = rows
            .into_iter()
            .enumerate()
            .map(|(s, row)| (vec![s], row))
            .collect();
        Self::new(1, vocab, initial, table)
    }

    /// A two-state chain that stays in its state with probability `stay`.
    pub fn two_state_chain(stay: f64) -> Result<Self> {
        let initial = Categorical::from_probs(&[0.5, 0.5])?;
        let rows = vec![
            Categorical::from_probs(&[stay, 1.0 - stay])?,
            Categorical::from_probs(&[1.0 - stay, stay])?,
        ];
        Self::order1(initial, rows)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn initial(&self) -> &Categorical {
        &self.initial
    }

    pub fn row(&self, key: &[Token]) -> Option<&Categorical> {
        self.table.get(key)
    }

    /// Exact probability of a full sequence from the empty context.
    pub fn sequence_prob(&self, seq: &[Token]) -> Result<f64> {
        let mut p = 1.0;
        for (k, &t) in seq.iter().enumerate() {
            p *= self.next_token_dist(&seq[..k])?.prob(t);
        }
        Ok(p)
    }

    /// Serializes as a line-oriented text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ptp-tabular v1");
        let _ = writeln!(s, "order {} vocab {}", self.order, self.vocab);
        let row_text = |row: &Categorical| {
            row.probs()
                .iter()
                .map(|p| format!("{p:.17e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, ": {}", row_text(&self.initial));
        let mut keys: Vec<&Vec<Token>> = self.table.keys().collect();
        keys.sort();
        for key in keys {
            let ctx = key
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(s, "{ctx} : {}", row_text(&self.table[key]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let malformed = |reason: &str| PtpError::Malformed {
            path: "<tabular>".into(),
            reason: reason.into(),
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("ptp-tabular v1") {
            return Err(malformed("missing 'ptp-tabular v1' header"));
        }
        let meta = lines.next().ok_or_else(|| malformed("missing meta line"))?;
        let parts: Vec<&str> = meta.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "order" || parts[2] != "vocab" {
            return Err(malformed("meta line must be 'order <m> vocab <v>'"));
        }
        let order: usize = parts[1].parse().map_err(|_| malformed("bad order"))?;
        let vocab: usize = parts[3].parse().map_err(|_| malformed("bad vocab"))?;
        let mut initial = None;
        let mut table = HashMap::new();
        for line in lines {
            let (ctx_part, row_part) = line
                .split_once(':')
                .ok_or_else(|| malformed("row line missing ':'"))?;
            let key: Vec<Token> = ctx_part
                .split_whitespace()
                .map(|t| t.parse::<Token>().map_err(|_| malformed("bad context token")))
                .collect::<Result<_>>()?;
            let probs: Vec<f64> = row_part
                .split_whitespace()
                .map(|p| p.parse::<f64>().map_err(|_| malformed("bad probability")))
                .collect::<Result<_>>()?;
            let row = Categorical::from_probs(&probs)?;
            if key.is_empty() {
                initial = Some(row);
            } else {
                table.insert(key, row);
            }
        }
        let initial = initial.ok_or_else(|| malformed("missing initial row"))?;
        Self::new(order, vocab, initial, table)
    }
}

impl ArModel for TabularTeacher {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn next_token_dist(&self, context: &[Token]) -> Result<Categorical> {
        if let Some(&bad) = context.iter().find(|&&t| t >= self.vocab) {
            return Err(PtpError::InvalidInput(format!(
                "context token {bad} out of vocabulary of size {}",
                self.vocab
            )));
        }
        if context.is_empty() {
            return Ok(self.initial.clone());
        }
        let take = context.len().min(self.order);
        for len in (1..=take).rev() {
            if let Some(row) = self.table.get(&context[context.len() - len..]) {
                return Ok(row.clone());
            }
        }
        Err(PtpError::InvalidInput(format!(
            "no table row for context suffix {:?}",
            &context[context.len() - take..]
        )))
    }
}

/// A trained transformer teacher: backbone logits shaped into final
/// distributions. Shaping is applied here so generation, auxiliary
/// extraction, and verification all see the same distributions.
#[derive(Debug, Clone)]
pub struct TransformerTeacher {
    pub(crate) lm: TransformerLm,
    shaping: ShapingParams,
}

impl TransformerTeacher {
    pub fn new(lm: TransformerLm, shaping: ShapingParams) -> Result<Self> {
        shaping.validate()?;
        Ok(Self { lm, shaping })
    }

    pub fn lm(&self) -> &TransformerLm {
        &self.lm
    }

    pub fn shaping(&self) -> &ShapingParams {
        &self.shaping
    }
}

impl ArModel for TransformerTeacher {
    fn vocab(&self) -> usize {
        self.lm.arch().vocab
    }

    fn next_token_dist(&self, context: &[Token]) -> Result<Categorical> {
        let logits = self.lm.next_logits(context)?;
        crate::sampling::shape_distribution(&logits, &self.shaping)
    }

    fn batch_dists(&self, context: &[Token], tokens: &[Token]) -> Result<Vec<Categorical>> {
        self.lm
            .sequence_logits(context, tokens)?
            .iter()
            .map(|row| crate::sampling::shape_distribution(row, &self.shaping))
            .collect()
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.lm.arch().max_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::sampling::AuxStream;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
    }

    #[test]
    fn tabular_lookup_and_initial_row() {
        let chain = TabularTeacher::two_state_chain(0.9).unwrap();
        let row = chain.next_token_dist(&[0]).unwrap();
        assert!(tv(row.probs(), &[0.9, 0.1]) < 1e-12);
        let init = chain.next_token_dist(&[]).unwrap();
        assert_eq!(init.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn tabular_rejects_out_of_vocab_context() {
        let chain = TabularTeacher::two_state_chain(0.9).unwrap();
        assert!(chain.next_token_dist(&[7]).is_err());
    }

    #[test]
    fn sequential_sample_hand_evaluated() {
        // From state 0 the CDF is [0.9, 1.0]: u = 0.95 picks token 1.
        // From state 1 the row is [0.1, 0.9], CDF [0.1, 1.0]: u = 0.05 picks 0.
        let chain = TabularTeacher::two_state_chain(0.9).unwrap();
        let aux = [
            AuxValue::new(0.95).unwrap(),
            AuxValue::new(0.05).unwrap(),
        ];
        let seq = sequential_sample(&chain, &[0], &aux, 2).unwrap();
        assert_eq!(seq, vec![1, 0]);
    }

    #[test]
    fn sequential_sample_all_zero_aux_takes_first_positive_bin() {
        let chain = TabularTeacher::two_state_chain(0.7).unwrap();
        let aux = [AuxValue::new(0.0).unwrap(); 3];
        let seq = sequential_sample(&chain, &[], &aux, 3).unwrap();
        assert_eq!(seq, vec![0, 0, 0]);
    }

    #[test]
    fn sequential_sample_is_deterministic_and_checks_length() {
        let chain = TabularTeacher::two_state_chain(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aux = AuxStream::uniform(5, &mut rng);
        let a = sequential_sample(&chain, &[1], aux.values(), 5).unwrap();
        let b = sequential_sample(&chain, &[1], aux.values(), 5).unwrap();
        assert_eq!(a, b);
        assert!(sequential_sample(&chain, &[1], aux.values(), 6).is_err());
    }

    #[test]
    fn uniform_auxiliaries_reproduce_chain_distribution() {
        // Rolling out with i.i.d. uniform auxiliaries must reproduce the
        // exact sequence distribution of the chain.
        let initial = Categorical::from_probs(&[0.5, 0.2, 0.3]).unwrap();
        let rows = vec![
            Categorical::from_probs(&[0.6, 0.3, 0.1]).unwrap(),
            Categorical::from_probs(&[0.1, 0.8, 0.1]).unwrap(),
            Categorical::from_probs(&[0.25, 0.25, 0.5]).unwrap(),
        ];
        let chain = TabularTeacher::order1(initial, rows).unwrap();
        let v: usize = 3;
        let len: usize = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = vec![0usize; v.pow(len as u32)];
        for _ in 0..n {
            let aux = AuxStream::uniform(len, &mut rng);
            let seq = sequential_sample(&chain, &[], aux.values(), len).unwrap();
            let idx = seq.iter().fold(0, |acc, &t| acc * v + t);
            counts[idx] += 1;
        }
        let mut exact = Vec::with_capacity(counts.len());
        for idx in 0..counts.len() {
            let mut seq = Vec::with_capacity(len);
            let mut rest = idx;
            for p in (0..len).rev() {
                seq.push(rest / v.pow(p as u32));
                rest %= v.pow(p as u32);
            }
            exact.push(chain.sequence_prob(&seq).unwrap());
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!(tv(&freq, &exact) < 0.02, "tv = {}", tv(&freq, &exact));
    }

    #[test]
    fn tabular_batch_matches_sequential_exactly() {
        let chain = TabularTeacher::two_state_chain(0.85).unwrap();
        let tokens = [0usize, 1, 1, 0];
        let batched = chain.batch_dists(&[1], &tokens).unwrap();
        let mut ctx = vec![1usize];
        for (k, &t) in tokens.iter().enumerate() {
            assert_eq!(batched[k], chain.next_token_dist(&ctx).unwrap());
            ctx.push(t);
        }
    }

    #[test]
    fn tabular_text_roundtrip() {
        let chain = TabularTeacher::two_state_chain(0.9).unwrap();
        let text = chain.to_text();
        let back = TabularTeacher::from_text(&text).unwrap();
        assert_eq!(back.vocab(), 2);
        assert_eq!(
            back.next_token_dist(&[0]).unwrap().probs(),
            chain.next_token_dist(&[0]).unwrap().probs()
        );
        assert_eq!(
            back.next_token_dist(&[]).unwrap().probs(),
            chain.next_token_dist(&[]).unwrap().probs()
        );
        assert!(TabularTeacher::from_text("garbage").is_err());
    }

    fn small_teacher(seed: u64) -> TransformerTeacher {
        let lm = TransformerLm::new(
            ArchConfig {
                vocab: 7,
                hidden: 16,
                layers: 2,
                heads: 2,
                max_seq: 24,
                ff: None,
            },
            seed,
        )
        .unwrap();
        TransformerTeacher::new(lm, ShapingParams::default()).unwrap()
    }

    #[test]
    fn transformer_rows_are_normalized() {
        let teacher = small_teacher(31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let len = rng.random_range(0..12);
            let ctx: Vec<usize> = (0..len).map(|_| rng.random_range(0..7)).collect();
            let dist = teacher.next_token_dist(&ctx).unwrap();
            let sum: f64 = dist.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transformer_batch_matches_sequential() {
        let teacher = small_teacher(33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..50 {
            let clen = rng.random_range(0..4);
            let ctx: Vec<usize> = (0..clen).map(|_| rng.random_range(0..7)).collect();
            let tlen = rng.random_range(1..8);
            let tokens: Vec<usize> = (0..tlen).map(|_| rng.random_range(0..7)).collect();
            let batched = teacher.batch_dists(&ctx, &tokens).unwrap();
            let mut prefix = ctx.clone();
            let mut max_diff = 0.0f64;
            for (k, &t) in tokens.iter().enumerate() {
                let direct = teacher.next_token_dist(&prefix).unwrap();
                for (a, b) in batched[k].probs().iter().zip(direct.probs()) {
                    max_diff = max_diff.max((a - b).abs());
                }
                prefix.push(t);
            }
            assert!(max_diff < 1e-5, "max prob difference {max_diff}");
        }
    }

    #[test]
    fn transformer_batch_length_one_equals_initial() {
        let teacher = small_teacher(35);
        let batched = teacher.batch_dists(&[], &[3]).unwrap();
        assert_eq!(batched.len(), 1);
        let direct = teacher.next_token_dist(&[]).unwrap();
        assert_eq!(batched[0].probs(), direct.probs());
    }

    #[test]
    fn oracle_decoder_matches_sequential_sample() {
        let chain = TabularTeacher::two_state_chain(0.75).unwrap();
        let oracle = OracleDecoder::new(&chain);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let aux = AuxStream::uniform(6, &mut rng);
        assert_eq!(
            oracle.decode_window(&[0], aux.values()).unwrap(),
            sequential_sample(&chain, &[0], aux.values(), 6).unwrap()
        );
    }
}
