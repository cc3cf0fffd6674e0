//! Synthetic data and experiment plumbing: a seeded clustered-sequence
//! generator (an order-1 chain with Dirichlet-sampled rows standing in for a
//! real location-sequence corpus), a newline-delimited token file format,
//! and the two-token compatibility map over the `(u_1, u_2)` unit square.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};

use crate::error::{PtpError, Result};
use crate::model::WindowDecoder;
use crate::sampling::{AuxStream, AuxValue, Categorical};
use crate::teacher::{sequential_sample, ArModel, TabularTeacher};
use crate::Token;

/// Synthetic corpus settings. `states` tokens, transition rows drawn from a
/// symmetric Dirichlet: a small `concentration` gives peaky, learnable rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub states: usize,
    pub concentration: f64,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            states: 25,
            concentration: 0.15,
            seq_len: 24,
            corpus_size: 2000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states < 2 {
            return Err(PtpError::InvalidConfig("states must be >= 2".into()));
        }
        if !(self.concentration > 0.0) {
            return Err(PtpError::InvalidConfig(
                "concentration must be positive".into(),
            ));
        }
        if self.seq_len == 0 || self.corpus_size == 0 {
            return Err(PtpError::InvalidConfig(
                "seq_len and corpus_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Symmetric Dirichlet row via normalized Gamma(alpha, 1) draws.
fn dirichlet_row<R: rand::Rng + ?Sized>(
    states: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Categorical> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| PtpError::InvalidParameter(format!("Gamma({alpha}, 1): {e}")))?;
    let mut probs: Vec<f64> = (0..states).map(|_| gamma.sample(rng)).collect();
    // Guard against all-zero underflow at tiny concentrations.
    if probs.iter().sum::<f64>() <= 0.0 {
        probs[rng.random_range(0..states)] = 1.0;
    }
    Categorical::from_probs(&probs)
}

/// The generating chain for a synthetic configuration (deterministic in the
/// seed). Doubles as the exact reference model in oracle tests.
pub fn synth_chain(config: &SynthConfig) -> Result<TabularTeacher> {
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let initial = dirichlet_row(config.states, config.concentration, &mut rng)?;
    let rows: Vec<Categorical> = (0..config.states)
        .map(|_| dirichlet_row(config.states, config.concentration, &mut rng))
        .collect::<Result<_>>()?;
    TabularTeacher::order1(initial, rows)
}

/// Generates the corpus: `corpus_size` rollouts of `seq_len` tokens from the
/// configuration's chain. Bitwise deterministic given the seed.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Vec<Token>>> {
    let chain = synth_chain(config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0de);
    (0..config.corpus_size)
        .map(|_| {
            let aux = AuxStream::uniform(config.seq_len, &mut rng);
            sequential_sample(&chain, &[], aux.values(), config.seq_len)
        })
        .collect()
}

/// A two-branch grammar: the first token picks a branch marker and every
/// following token must stay inside that branch's continuation set. Token
/// pairs that cross branches have exactly zero probability, which makes the
/// compatibility predicate sharp.
///
/// Vocabulary: `{0, 1}` are branch markers; `{2, 3}` continue branch 0;
/// `{4, 5}` continue branch 1. Continuations return to the markers.
pub fn two_branch_grammar() -> Result<TabularTeacher> {
    let initial = Categorical::from_probs(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0])?;
    let marker = initial.clone();
    let rows = vec![
        Categorical::from_probs(&[0.0, 0.0, 0.5, 0.5, 0.0, 0.0])?,
        Categorical::from_probs(&[0.0, 0.0, 0.0, 0.0, 0.5, 0.5])?,
        marker.clone(),
        marker.clone(),
        marker.clone(),
        marker,
    ];
    TabularTeacher::order1(initial, rows)
}

/// Writes a token corpus as newline-delimited, space-separated decimal ids.
pub fn save_token_file(path: &Path, corpus: &[Vec<Token>]) -> Result<()> {
    let mut text = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Reads a token corpus. `vocab`, when given, validates every id; otherwise
/// the vocabulary is inferred by the caller from the maximum id.
pub fn load_token_file(path: &Path, vocab: Option<usize>) -> Result<Vec<Vec<Token>>> {
    let text = std::fs::read_to_string(path)?;
    let mut corpus = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for field in line.split_whitespace() {
            let t: Token = field.parse().map_err(|_| PtpError::Malformed {
                path: path.display().to_string(),
                reason: format!("line {}: {field:?} is not a token id", lineno + 1),
            })?;
            if let Some(v) = vocab {
                if t >= v {
                    return Err(PtpError::Malformed {
                        path: path.display().to_string(),
                        reason: format!("line {}: token {t} >= vocabulary {v}", lineno + 1),
                    });
                }
            }
            seq.push(t);
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

/// Write-temp-then-rename, so concurrent readers never observe a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One grid cell of the pair map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct PairCell {
    pub first: Token,
    pub second: Token,
    pub compatible: bool,
}

/// The first two decoded tokens over a grid of `(u_1, u_2)` cells, with a
/// compatibility label per cell.
#[derive(Debug, Clone)]
pub struct PairRegionMap {
    pub resolution: usize,
    /// Row-major: `cells[a * resolution + b]` is the cell at
    /// `u_1 = (a + 1/2) / resolution`, `u_2 = (b + 1/2) / resolution`.
    pub cells: Vec<PairCell>,
}

impl PairRegionMap {
    pub fn cell(&self, a: usize, b: usize) -> &PairCell {
        &self.cells[a * self.resolution + b]
    }

    /// Area fraction of incompatible cells.
    pub fn incompatible_rate(&self) -> f64 {
        let bad = self.cells.iter().filter(|c| !c.compatible).count();
        bad as f64 / self.cells.len() as f64
    }

    /// `u_1` breakpoints where the first token changes between grid columns,
    /// scanned at the cell centers of the first row dimension.
    pub fn first_token_boundaries(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in 1..self.resolution {
            if self.cell(a, 0).first != self.cell(a - 1, 0).first {
                out.push(a as f64 / self.resolution as f64);
            }
        }
        out
    }

    /// CSV rows `u1,u2,first,second,compatible`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("u1,u2,first,second,compatible\n");
        for a in 0..self.resolution {
            for b in 0..self.resolution {
                let cell = self.cell(a, b);
                let u1 = (a as f64 + 0.5) / self.resolution as f64;
                let u2 = (b as f64 + 0.5) / self.resolution as f64;
                s.push_str(&format!(
                    "{u1},{u2},{},{},{}\n",
                    cell.first, cell.second, cell.compatible
                ));
            }
        }
        s
    }
}

/// Labels an ordered token pair as compatible or not.
pub trait PairPredicate: Sync {
    fn compatible(&self, first: Token, second: Token) -> bool;
}

/// Compatible iff the reference model gives the second token positive
/// probability after the first (in the evaluation context).
pub struct VerifierSupport<'a> {
    verifier: &'a dyn ArModel,
    context: Vec<Token>,
}

impl<'a> VerifierSupport<'a> {
    pub fn new(verifier: &'a dyn ArModel, context: Vec<Token>) -> Self {
        Self { verifier, context }
    }
}

impl PairPredicate for VerifierSupport<'_> {
    fn compatible(&self, first: Token, second: Token) -> bool {
        let mut ctx = self.context.clone();
        ctx.push(first);
        match self.verifier.next_token_dist(&ctx) {
            Ok(dist) => dist.prob(second) > 0.0,
            Err(_) => false,
        }
    }
}

impl<F: Fn(Token, Token) -> bool + Sync> PairPredicate for F {
    fn compatible(&self, first: Token, second: Token) -> bool {
        self(first, second)
    }
}

/// Decodes the first two tokens of `model` at every cell center of a
/// `resolution x resolution` grid over `(u_1, u_2)` and labels each cell
/// with the predicate.
pub fn pair_region_map(
    model: &dyn WindowDecoder,
    context: &[Token],
    resolution: usize,
    predicate: &dyn PairPredicate,
) -> Result<PairRegionMap> {
    if resolution < 2 {
        return Err(PtpError::InvalidParameter("resolution must be >= 2".into()));
    }
    let mut cells = Vec::with_capacity(resolution * resolution);
    for a in 0..resolution {
        let u1 = AuxValue::new(((a as f64 + 0.5) / resolution as f64) as f32)?;
        for b in 0..resolution {
            let u2 = AuxValue::new(((b as f64 + 0.5) / resolution as f64) as f32)?;
            let tokens = model.decode_window(context, &[u1, u2])?;
            cells.push(PairCell {
                first: tokens[0],
                second: tokens[1],
                compatible: predicate.compatible(tokens[0], tokens[1]),
            });
        }
    }
    Ok(PairRegionMap { resolution, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::OracleDecoder;

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let config = SynthConfig {
            states: 5,
            corpus_size: 20,
            seq_len: 10,
            ..Default::default()
        };
        let a = synth_generate(&config).unwrap();
        let b = synth_generate(&config).unwrap();
        assert_eq!(a, b);
        let other = synth_generate(&SynthConfig {
            seed: 8,
            ..config
        })
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn corpus_transition_frequencies_match_generator() {
        let config = SynthConfig {
            states: 6,
            concentration: 0.4,
            seq_len: 50,
            corpus_size: 2000,
            seed: 3,
        };
        let chain = synth_chain(&config).unwrap();
        let corpus = synth_generate(&config).unwrap();
        let mut counts = vec![vec![0usize; 6]; 6];
        for seq in &corpus {
            for w in seq.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
        }
        for state in 0..6 {
            let total: usize = counts[state].iter().sum();
            if total < 5000 {
                continue; // rare state, not enough transitions to compare
            }
            let freq: Vec<f64> = counts[state]
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect();
            let truth = chain.row(&[state]).unwrap().probs();
            assert!(tv(&freq, truth) < 0.02, "state {state}: tv {}", tv(&freq, truth));
        }
    }

    #[test]
    fn default_config_mirrors_the_benchmark_shape() {
        let config = SynthConfig::default();
        assert_eq!(config.states, 25);
        let chain = synth_chain(&config).unwrap();
        assert_eq!(chain.vocab(), 25);
    }

    #[test]
    fn token_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        let corpus = vec![vec![0usize, 3, 2], vec![1, 1], vec![4]];
        save_token_file(&path, &corpus).unwrap();
        let back = load_token_file(&path, Some(5)).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn empty_token_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        assert_eq!(load_token_file(&path, None).unwrap().len(), 0);
    }

    #[test]
    fn token_file_rejects_garbage_and_overflow() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0 1 x\n").unwrap();
        assert!(matches!(
            load_token_file(&path, None),
            Err(PtpError::Malformed { .. })
        ));
        std::fs::write(&path, "0 9\n").unwrap();
        assert!(load_token_file(&path, Some(5)).is_err());
    }

    #[test]
    fn synth_dump_reingests_exactly() {
        let config = SynthConfig {
            states: 4,
            corpus_size: 30,
            seq_len: 8,
            ..Default::default()
        };
        let corpus = synth_generate(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.txt");
        save_token_file(&path, &corpus).unwrap();
        assert_eq!(load_token_file(&path, Some(4)).unwrap(), corpus);
    }

    #[test]
    fn oracle_pair_map_has_zero_incompatible_area() {
        // Sequential sampling can only produce pairs the grammar supports.
        let grammar = two_branch_grammar().unwrap();
        let oracle = OracleDecoder::new(&grammar);
        let predicate = VerifierSupport::new(&grammar, vec![]);
        let map = pair_region_map(&oracle, &[], 32, &predicate).unwrap();
        assert_eq!(map.incompatible_rate(), 0.0);
    }

    #[test]
    fn oracle_pair_map_boundaries_align_with_first_token_cdf() {
        let grammar = two_branch_grammar().unwrap();
        let oracle = OracleDecoder::new(&grammar);
        let predicate = VerifierSupport::new(&grammar, vec![]);
        let resolution = 64;
        let map = pair_region_map(&oracle, &[], resolution, &predicate).unwrap();
        let boundaries = map.first_token_boundaries();
        // The grammar's first-token CDF has a single interior breakpoint at 0.5.
        assert_eq!(boundaries.len(), 1);
        assert!((boundaries[0] - 0.5).abs() <= 1.0 / resolution as f64);
    }

    #[test]
    fn pair_map_csv_shape() {
        let grammar = two_branch_grammar().unwrap();
        let oracle = OracleDecoder::new(&grammar);
        let map = pair_region_map(&oracle, &[], 8, &(|a: Token, b: Token| a + 2 <= b)).unwrap();
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), 1 + 64);
        assert!(csv.starts_with("u1,u2,first,second,compatible\n"));
    }
}
