//! Python bindings for the parallel token prediction core: the sampling
//! kernel, tabular reference models, and the error-corrected decoding loop.
//!
//! Build with `cargo build -p ptp-py --release` and import the produced
//! `libptp_py.so` as `ptp_py` (see `python/smoke_test.py`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptp_core::decode;
use ptp_core::harness::{synth_generate, SynthConfig};
use ptp_core::sampling::{self, AuxInterval, AuxValue, ShapingParams};
use ptp_core::teacher::{self, ArModel, OracleDecoder};

fn err(e: ptp_core::PtpError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A categorical distribution with its cumulative distribution function.
#[pyclass]
struct Categorical {
    inner: sampling::Categorical,
}

#[pymethods]
impl Categorical {
    /// Normalizes a nonnegative weight vector and builds the CDF.
    #[new]
    fn new(probs: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: sampling::Categorical::from_probs(&probs).map_err(err)?,
        })
    }

    /// Shapes a logit row: softmax at `temperature`, then top-k, then top-p.
    #[staticmethod]
    #[pyo3(signature = (logits, temperature=1.0, top_k=None, top_p=None))]
    fn from_logits(
        logits: Vec<f64>,
        temperature: f64,
        top_k: Option<usize>,
        top_p: Option<f64>,
    ) -> PyResult<Self> {
        let params = ShapingParams {
            temperature,
            top_k,
            top_p,
        };
        Ok(Self {
            inner: sampling::shape_distribution(&logits, &params).map_err(err)?,
        })
    }

    fn probs(&self) -> Vec<f64> {
        self.inner.probs().to_vec()
    }

    fn cdf(&self) -> Vec<f64> {
        self.inner.cdf().to_vec()
    }

    /// Smallest token index whose cumulative probability strictly exceeds `u`.
    fn pick(&self, u: f64) -> PyResult<usize> {
        if !(0.0..1.0).contains(&u) {
            return Err(PyValueError::new_err(format!("u = {u} outside [0, 1)")));
        }
        Ok(self.inner.pick(u))
    }

    /// Half-open `[lo, hi)` of auxiliary values that reproduce `token`.
    fn compatible_interval(&self, token: usize) -> PyResult<(f64, f64)> {
        let iv = self.inner.compatible_interval(token).map_err(err)?;
        Ok((iv.lo, iv.hi))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// IEEE-754 bits of a float32 in [0, 1): sign, exponent, mantissa, most
/// significant bit first.
#[pyfunction]
fn float_bits(u: f32) -> PyResult<Vec<u8>> {
    Ok(sampling::float_bits(u).map_err(err)?.to_vec())
}

/// Inverse of `float_bits`; exact.
#[pyfunction]
fn bits_float(bits: Vec<u8>) -> PyResult<f32> {
    let arr: [u8; 32] = bits
        .try_into()
        .map_err(|_| PyValueError::new_err("expected exactly 32 bits"))?;
    sampling::bits_float(&arr).map_err(err)
}

/// Draws a float32 auxiliary inside `[lo, hi)` as `lo + Beta(b, b) * (hi - lo)`.
#[pyfunction]
fn sample_in_interval(lo: f64, hi: f64, b: f64, seed: u64) -> PyResult<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampling::sample_in_interval(AuxInterval { lo, hi }, b, &mut rng)
        .map(|u| u.value())
        .map_err(err)
}

/// An exact low-order Markov reference model.
#[pyclass]
struct TabularTeacher {
    inner: teacher::TabularTeacher,
}

#[pymethods]
impl TabularTeacher {
    /// Order-1 chain from an initial distribution and one row per state.
    #[new]
    fn new(initial: Vec<f64>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let initial = sampling::Categorical::from_probs(&initial).map_err(err)?;
        let rows = rows
            .iter()
            .map(|r| sampling::Categorical::from_probs(r))
            .collect::<ptp_core::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(Self {
            inner: teacher::TabularTeacher::order1(initial, rows).map_err(err)?,
        })
    }

    /// Seeded random chain with Dirichlet-sampled rows (the synthetic task).
    #[staticmethod]
    fn synth(states: usize, concentration: f64, seed: u64) -> PyResult<Self> {
        let config = SynthConfig {
            states,
            concentration,
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: ptp_core::harness::synth_chain(&config).map_err(err)?,
        })
    }

    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn next_token_dist(&self, context: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .next_token_dist(&context)
            .map_err(err)?
            .probs()
            .to_vec())
    }

    /// Deterministic sequential sample under explicit auxiliary values.
    fn sequential_sample(&self, context: Vec<usize>, aux: Vec<f32>) -> PyResult<Vec<usize>> {
        let aux = aux
            .into_iter()
            .map(AuxValue::new)
            .collect::<ptp_core::Result<Vec<_>>>()
            .map_err(err)?;
        teacher::sequential_sample(&self.inner, &context, &aux, aux.len()).map_err(err)
    }

    /// Seeded ancestral sample of `n` tokens.
    fn sample(&self, context: Vec<usize>, n: usize, seed: u64) -> PyResult<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aux: Vec<AuxValue> = (0..n).map(|_| AuxValue::random(&mut rng)).collect();
        teacher::sequential_sample(&self.inner, &context, &aux, n).map_err(err)
    }

    fn sequence_prob(&self, seq: Vec<usize>) -> PyResult<f64> {
        self.inner.sequence_prob(&seq).map_err(err)
    }
}

/// Longest matching prefix plus one corrected token, capped at the window:
/// returns `(n_correct, n_accepted)`.
#[pyfunction]
fn count_correct(student: Vec<usize>, verifier: Vec<usize>) -> PyResult<(usize, usize)> {
    let n = student.len();
    decode::count_correct(&student, &verifier, n).map_err(err)
}

/// Error-corrected block generation with the teacher's own sequential sample
/// as the draft model (every window verifies fully). Returns a dict with the
/// tokens, per-step acceptance records, and aggregate counts.
#[pyfunction]
fn oracle_generate<'py>(
    py: Python<'py>,
    teacher: &TabularTeacher,
    prompt: Vec<usize>,
    window: usize,
    max_tokens: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let oracle = OracleDecoder::new(&teacher.inner);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tokens, report, aux) = decode::generate_with_verification(
        &prompt,
        &oracle,
        &teacher.inner,
        window,
        max_tokens,
        None,
        &mut rng,
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("tokens", tokens)?;
    out.set_item(
        "steps",
        report
            .steps
            .iter()
            .map(|s| (s.start, s.correct, s.accepted))
            .collect::<Vec<_>>(),
    )?;
    out.set_item("mean_accepted", report.mean_accepted())?;
    out.set_item("speedup_estimate", report.speedup_estimate)?;
    out.set_item("aux_codes", aux.codes())?;
    Ok(out)
}

/// Seeded synthetic corpus: `corpus_size` rollouts of `seq_len` tokens.
#[pyfunction]
fn synth_corpus(
    states: usize,
    concentration: f64,
    seq_len: usize,
    corpus_size: usize,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let config = SynthConfig {
        states,
        concentration,
        seq_len,
        corpus_size,
        seed,
    };
    synth_generate(&config).map_err(err)
}

#[pymodule]
fn ptp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Categorical>()?;
    m.add_class::<TabularTeacher>()?;
    m.add_function(wrap_pyfunction!(float_bits, m)?)?;
    m.add_function(wrap_pyfunction!(bits_float, m)?)?;
    m.add_function(wrap_pyfunction!(sample_in_interval, m)?)?;
    m.add_function(wrap_pyfunction!(count_correct, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_generate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    Ok(())
}
