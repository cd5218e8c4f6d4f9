import ctypes

import pytest

# Keep large allocations on the brk heap so freed blocks are reused. The
# sandboxed kernels these tests run under make every mmap/munmap cycle pay
# page-fault costs, which turns per-call tensor allocation into the dominant
# (and wildly variable) term of the wall-clock benchmarks. Best effort only.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
    _libc.mallopt(-4, 0)  # M_MMAP_MAX
except OSError:
    pass

import torch

from cvrmkit.synth import synthesize_corpus

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def small_corpus():
    """200 records, 25% positive, deterministic."""
    records, manifest = synthesize_corpus(200, 0.25, seed=7)
    return records, manifest
