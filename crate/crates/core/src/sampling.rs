//! Deterministic sampling kernel.
//!
//! Everything here is a pure function of its inputs plus an explicit seeded
//! random source. The central objects are [`Categorical`] (a probability
//! vector with its cumulative distribution), [`AuxValue`] (a float32
//! auxiliary variable in `[0, 1)` together with its 32-bit code), and
//! [`AuxInterval`] (the half-open CDF sub-interval of auxiliary values that
//! reproduce a given token).
//!
//! Boundary semantics are normative: `pick` returns the smallest index `j`
//! with `cdf[j] > u` (strict), intervals are half-open `[lo, hi)`, and
//! `cdf[-1]` is defined as 0.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{PtpError, Result};
use crate::Token;

/// Probability floor applied before CDF construction when auxiliary values
/// are extracted for observed tokens. Keeps every token's interval nonempty
/// as long as the underlying model assigns it nonzero mass.
pub const PROB_FLOOR: f64 = 1e-9;

/// A categorical distribution over a vocabulary, stored as normalized
/// probabilities plus the derived cumulative distribution.
///
/// Invariants after construction: probabilities sum to 1 (within 1e-6),
/// the CDF is nondecreasing, and its last entry is exactly 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl Categorical {
    /// Normalizes a nonnegative weight vector and builds its CDF.
    ///
    /// Partial sums are accumulated in f64 and the final entry is clamped
    /// to exactly 1.0 so `pick` is total for every `u < 1`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(PtpError::InvalidDistribution("empty vector".into()));
        }
        let mut sum = 0.0;
        for (j, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(PtpError::InvalidDistribution(format!(
                    "entry {j} is {p}, expected a finite nonnegative value"
                )));
            }
            sum += p;
        }
        if sum <= 0.0 {
            return Err(PtpError::InvalidDistribution("all entries are zero".into()));
        }
        let probs: Vec<f64> = probs.iter().map(|&p| p / sum).collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cdf.push(acc.min(1.0));
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { probs, cdf })
    }

    /// Like [`from_probs`](Self::from_probs) but floors every entry at
    /// `floor` first. Used when extracting auxiliaries for observed tokens,
    /// where a zero-probability entry would create an empty interval.
    pub fn from_probs_floored(probs: &[f64], floor: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(PtpError::InvalidDistribution("empty vector".into()));
        }
        let floored: Vec<f64> = probs.iter().map(|&p| p.max(floor)).collect();
        Self::from_probs(&floored)
    }

    /// Plain max-subtracted softmax of a logit row.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        shape_distribution(logits, &ShapingParams::default())
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token]
    }

    /// Cumulative mass strictly below `token`; `cdf[-1]` is 0 by convention.
    pub fn cdf_below(&self, token: Token) -> f64 {
        if token == 0 {
            0.0
        } else {
            self.cdf[token - 1]
        }
    }

    /// Inverse-CDF lookup: the smallest token `j` with `cdf[j] > u`.
    ///
    /// Total for `u in [0, 1)` because the last CDF entry is exactly 1.
    pub fn pick(&self, u: f64) -> Token {
        debug_assert!((0.0..1.0).contains(&u), "u = {u} outside [0, 1)");
        // Linear scan; vocabularies here are small and the order is fixed.
        for (j, &f) in self.cdf.iter().enumerate() {
            if f > u {
                return j;
            }
        }
        self.probs.len() - 1
    }

    /// The half-open interval of auxiliary values that `pick` maps to
    /// `token`: `[cdf[token-1], cdf[token])`.
    pub fn compatible_interval(&self, token: Token) -> Result<AuxInterval> {
        if token >= self.probs.len() {
            return Err(PtpError::InvalidInput(format!(
                "token {token} out of vocabulary of size {}",
                self.probs.len()
            )));
        }
        let lo = self.cdf_below(token);
        let hi = self.cdf[token];
        if !(hi > lo) {
            return Err(PtpError::UnextractableToken { token, position: 0 });
        }
        Ok(AuxInterval { lo, hi })
    }

    /// Index of the largest probability, ties broken toward the lowest index.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = j;
            }
        }
        best
    }
}

/// A half-open interval `[lo, hi)` of auxiliary values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxInterval {
    pub lo: f64,
    pub hi: f64,
}

impl AuxInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, u: f64) -> bool {
        self.lo <= u && u < self.hi
    }

    pub fn midpoint(&self) -> f64 {
        self.lo + 0.5 * (self.hi - self.lo)
    }

    /// Affine map of `t in [0, 1]` onto the interval.
    pub fn lerp(&self, t: f64) -> f64 {
        self.lo + t * (self.hi - self.lo)
    }

    /// Relative position of `u` inside the interval (0 at `lo`, 1 at `hi`).
    pub fn relative(&self, u: f64) -> f64 {
        (u - self.lo) / (self.hi - self.lo)
    }
}

/// An auxiliary variable: a float32 value in `[0, 1)`.
///
/// The 32-bit code is the IEEE-754 bit pattern in sign–exponent–mantissa
/// order, most significant bit first; the codec is a bijection on finite
/// float32 values in range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxValue {
    u: f32,
}

impl AuxValue {
    pub fn new(u: f32) -> Result<Self> {
        if !u.is_finite() || !(0.0..1.0).contains(&u) {
            return Err(PtpError::InvalidInput(format!(
                "auxiliary value {u} outside [0, 1)"
            )));
        }
        Ok(Self { u })
    }

    /// Draws a fresh uniform auxiliary from `rng`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { u: rng.random::<f32>() }
    }

    pub fn value(&self) -> f32 {
        self.u
    }

    pub fn as_f64(&self) -> f64 {
        self.u as f64
    }

    /// IEEE-754 bit vector, sign bit at index 0.
    pub fn bits(&self) -> [u8; 32] {
        float_bits(self.u).expect("AuxValue is valid by construction")
    }

    /// Raw 32-bit code (same information as [`bits`](Self::bits)).
    pub fn code(&self) -> u32 {
        self.u.to_bits()
    }
}

/// Encodes a float32 in `[0, 1)` as its 32 IEEE-754 bits, sign bit first,
/// then 8 exponent bits, then 23 mantissa bits.
pub fn float_bits(u: f32) -> Result<[u8; 32]> {
    if !u.is_finite() || !(0.0..1.0).contains(&u) {
        return Err(PtpError::InvalidInput(format!(
            "cannot encode {u}: not a finite float32 in [0, 1)"
        )));
    }
    let raw = u.to_bits();
    let mut bits = [0u8; 32];
    for (i, b) in bits.iter_mut().enumerate() {
        *b = ((raw >> (31 - i)) & 1) as u8;
    }
    Ok(bits)
}

/// Inverse of [`float_bits`]; exact on every encodable value.
pub fn bits_float(bits: &[u8; 32]) -> Result<f32> {
    let mut raw = 0u32;
    for (i, &b) in bits.iter().enumerate() {
        if b > 1 {
            return Err(PtpError::InvalidInput(format!(
                "bit {i} is {b}, expected 0 or 1"
            )));
        }
        raw |= (b as u32) << (31 - i);
    }
    let u = f32::from_bits(raw);
    if !u.is_finite() || !(0.0..1.0).contains(&u) {
        return Err(PtpError::InvalidInput(format!(
            "decoded value {u} outside [0, 1)"
        )));
    }
    Ok(u)
}

/// Draws an auxiliary value inside `interval` as `lo + beta * (hi - lo)`
/// with `beta ~ Beta(b, b)`. `b = 1` is uniform; larger `b` concentrates
/// draws near the interval center.
///
/// The result is rounded to float32 and nudged back inside the interval if
/// rounding pushed it out; an interval containing no float32 at all yields
/// [`PtpError::UnrepresentableInterval`].
pub fn sample_in_interval<R: Rng + ?Sized>(
    interval: AuxInterval,
    b: f64,
    rng: &mut R,
) -> Result<AuxValue> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(PtpError::InvalidParameter(format!(
            "Beta shape b = {b}, expected a positive finite value"
        )));
    }
    if !(interval.width() > 0.0) {
        return Err(PtpError::InvalidParameter(format!(
            "empty interval [{}, {})",
            interval.lo, interval.hi
        )));
    }
    let t = Beta::new(b, b)
        .map_err(|e| PtpError::InvalidParameter(format!("Beta({b}, {b}): {e}")))?
        .sample(rng);
    clamp_to_interval(interval.lerp(t), interval)
}

/// Rounds `u` to float32 and walks it back inside `[lo, hi)` if needed.
fn clamp_to_interval(u: f64, interval: AuxInterval) -> Result<AuxValue> {
    let mut uf = (u as f32).clamp(0.0, 1.0 - f32::EPSILON / 2.0);
    for _ in 0..4 {
        if (uf as f64) < interval.lo {
            uf = uf.next_up();
        } else if (uf as f64) >= interval.hi.min(1.0) {
            uf = uf.next_down();
        } else {
            break;
        }
    }
    if (uf as f64) < interval.lo || (uf as f64) >= interval.hi || !(0.0..1.0).contains(&uf) {
        return Err(PtpError::UnrepresentableInterval {
            lo: interval.lo,
            hi: interval.hi,
        });
    }
    Ok(AuxValue { u: uf })
}

/// An ordered sequence of auxiliary values for a prediction window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuxStream {
    values: Vec<AuxValue>,
}

impl AuxStream {
    pub fn new(values: Vec<AuxValue>) -> Self {
        Self { values }
    }

    /// `n` fresh i.i.d. uniform auxiliaries.
    pub fn uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self {
            values: (0..n).map(|_| AuxValue::random(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[AuxValue] {
        &self.values
    }

    pub fn get(&self, k: usize) -> Option<AuxValue> {
        self.values.get(k).copied()
    }

    pub fn push(&mut self, u: AuxValue) {
        self.values.push(u);
    }

    pub fn extend_from(&mut self, other: &[AuxValue]) {
        self.values.extend_from_slice(other);
    }

    /// The 32-bit codes of all values, in order.
    pub fn codes(&self) -> Vec<u32> {
        self.values.iter().map(|v| v.code()).collect()
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            values: self.values[..n].to_vec(),
        }
    }
}

impl std::ops::Index<usize> for AuxStream {
    type Output = AuxValue;
    fn index(&self, k: usize) -> &AuxValue {
        &self.values[k]
    }
}

/// Temperature / top-k / top-p shaping applied to a logit row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapingParams {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl Default for ShapingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: None,
        }
    }
}

impl ShapingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(PtpError::InvalidParameter(format!(
                "temperature {} must be positive and finite",
                self.temperature
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                return Err(PtpError::InvalidParameter("top_k must be >= 1".into()));
            }
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(PtpError::InvalidParameter(format!(
                    "top_p {p} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Shapes a logit row into a final sampling distribution: stable softmax at
/// the given temperature, then top-k truncation, then top-p truncation
/// (measured on the surviving mass), then a single renormalization.
///
/// Ties in the top-k / top-p ordering break toward the lowest token index.
pub fn shape_distribution(logits: &[f64], params: &ShapingParams) -> Result<Categorical> {
    params.validate()?;
    if logits.is_empty() {
        return Err(PtpError::InvalidInput("empty logit row".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(PtpError::InvalidInput("non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / params.temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }

    let needs_order = params.top_k.map_or(false, |k| k < probs.len()) || params.top_p.is_some();
    if needs_order {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut keep = vec![false; probs.len()];
        let k = params.top_k.unwrap_or(probs.len()).min(probs.len());
        let survivors = &order[..k];
        match params.top_p {
            Some(p) => {
                let total: f64 = survivors.iter().map(|&j| probs[j]).sum();
                let mut acc = 0.0;
                for &j in survivors {
                    keep[j] = true;
                    acc += probs[j];
                    if acc >= p * total {
                        break;
                    }
                }
            }
            None => {
                for &j in survivors {
                    keep[j] = true;
                }
            }
        }
        for (j, p) in probs.iter_mut().enumerate() {
            if !keep[j] {
                *p = 0.0;
            }
        }
    }
    Categorical::from_probs(&probs)
}
