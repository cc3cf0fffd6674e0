#!/usr/bin/env python3
"""Smoke test for the ptp_py extension module.

Builds the cdylib with cargo if needed, imports it, and exercises the
sampling kernel, a tabular reference model, and the error-corrected
decoding loop from Python.

Run from the repository root:  python3 python/smoke_test.py
"""

import math
import pathlib
import shutil
import struct
import subprocess
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def build_and_import():
    lib = REPO / "target" / "release" / "libptp_py.so"
    if not lib.exists():
        subprocess.run(
            ["cargo", "build", "-p", "ptp-py", "--release"], cwd=REPO, check=True
        )
    staging = pathlib.Path(tempfile.mkdtemp(prefix="ptp-py-"))
    shutil.copy2(lib, staging / "ptp_py.so")
    sys.path.insert(0, str(staging))
    import ptp_py

    return ptp_py


def main():
    ptp = build_and_import()

    # CDF construction and strict-boundary pick semantics.
    dist = ptp.Categorical([0.3, 0.5, 0.2])
    cdf = dist.cdf()
    assert abs(cdf[0] - 0.3) < 1e-9 and abs(cdf[1] - 0.8) < 1e-9 and cdf[2] == 1.0
    assert dist.pick(0.05) == 0
    assert dist.pick(0.3) == 1, "u on a breakpoint belongs to the next token"
    lo, hi = dist.compatible_interval(1)
    assert abs(lo - 0.3) < 1e-9 and abs(hi - 0.8) < 1e-9

    # Interval sampling round-trips through pick.
    for seed in range(50):
        u = ptp.sample_in_interval(lo, hi, 1.0, seed)
        assert lo <= u < hi
        assert dist.pick(u) == 1

    # Logit shaping: symmetric logits, top-k truncation.
    flat = ptp.Categorical.from_logits([0.0, 0.0])
    assert abs(flat.probs()[0] - 0.5) < 1e-12
    greedy = ptp.Categorical.from_logits([0.1, 2.0, 0.3], top_k=1)
    assert greedy.probs() == [0.0, 1.0, 0.0]

    # The float32 bit codec agrees with struct packing and round-trips.
    # (pyo3 hands Vec<u8> to Python as bytes.)
    bits = list(ptp.float_bits(0.5))
    packed = struct.pack(">f", 0.5)
    expect = [(packed[i // 8] >> (7 - i % 8)) & 1 for i in range(32)]
    assert bits == expect
    assert ptp.bits_float(bits) == 0.5
    assert list(ptp.float_bits(0.0)) == [0] * 32

    # A two-state sticky chain: hand-evaluated sequential sample.
    chain = ptp.TabularTeacher([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]])
    assert chain.sequential_sample([0], [0.95, 0.05]) == [1, 0]
    row = chain.next_token_dist([0])
    assert abs(row[0] - 0.9) < 1e-9

    # Acceptance accounting.
    assert ptp.count_correct([1, 2, 3], [1, 2, 3]) == (3, 3)
    assert ptp.count_correct([9, 2, 3], [1, 2, 3]) == (0, 1)

    # Error-corrected generation with an oracle draft: every window accepted
    # in full, and fully deterministic in the seed.
    synth = ptp.TabularTeacher.synth(states=8, concentration=0.3, seed=11)
    out1 = ptp.oracle_generate(synth, [], window=4, max_tokens=16, seed=5)
    out2 = ptp.oracle_generate(synth, [], window=4, max_tokens=16, seed=5)
    assert out1["tokens"] == out2["tokens"]
    assert len(out1["tokens"]) == 16
    assert all(c == 4 and a == 4 for (_, c, a) in out1["steps"])
    assert math.isclose(out1["speedup_estimate"], 2.0)

    # The emitted tokens replay exactly from the accepted auxiliary stream.
    aux = [struct.unpack(">f", struct.pack(">I", code))[0] for code in out1["aux_codes"]]
    assert synth.sequential_sample([], aux) == out1["tokens"]

    # Synthetic corpus generation is seed-deterministic.
    a = ptp.synth_corpus(6, 0.3, 10, 5, seed=3)
    b = ptp.synth_corpus(6, 0.3, 10, 5, seed=3)
    assert a == b and len(a) == 5 and len(a[0]) == 10

    print("ptp_py smoke test: all checks passed")


if __name__ == "__main__":
    main()
