import numpy as np
import pytest

from inattention import tensor as tn
from inattention.model import ModelConfig, forward_full, init_params
from inattention.tensor import max_relative_error
from inattention.training import next_token_loss


def small_config(variant="dense", **kw) -> ModelConfig:
    base = dict(variant=variant, d_model=16, n_layers=2, n_heads=2, vocab_size=32, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny64():
    def make(variant="dense", seed=0, **kw):
        return init_params(small_config(variant, **kw), seed)

    return make


def model_gradient_errors(params, tokens, eps: float) -> dict[str, float]:
    """Worst elementwise relative error between taped and central-difference gradients, per tensor."""
    params.zero_grad()
    tn.backward(next_token_loss(forward_full(params, tokens), tokens))
    errors = {}
    with tn.no_grad():
        for name, t in params.named_tensors():
            numeric = np.empty_like(t.data)
            for i in np.ndindex(t.shape):
                orig = t.data[i]
                t.data[i] = orig + eps
                hi = next_token_loss(forward_full(params, tokens), tokens).item()
                t.data[i] = orig - eps
                lo = next_token_loss(forward_full(params, tokens), tokens).item()
                t.data[i] = orig
                numeric[i] = (hi - lo) / (2 * eps)
            errors[name] = max_relative_error(t.grad, numeric)
    params.zero_grad()
    return errors


@pytest.fixture(scope="session")
def reference_files(tmp_path_factory):
    """Paths of the ~1 MB stdlib-prose training file and its held-out eval file."""
    from inattention.data_io import build_reference_corpus

    return build_reference_corpus(tmp_path_factory.mktemp("corpus"), train_bytes=1_000_000)


@pytest.fixture(scope="session")
def reference_corpus(reference_files):
    from inattention.data_io import read_corpus

    return tuple(read_corpus(p) for p in reference_files)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or benchmark test")
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
