import hashlib
import json
from dataclasses import asdict

import pytest
import torch

from antidiff import data
from antidiff.core.checkpoint import load_model, read_tensors, save_model
from antidiff.core.model import TINY_CONFIG, ToyLDM
from antidiff.core.train import PretrainConfig, pretrain_toy


def fd_directional(fn, x, direction, h=1e-4):
    """Central difference of scalar ``fn`` at ``x`` along ``direction``."""
    with torch.no_grad():
        return (float(fn(x + h * direction)) - float(fn(x - h * direction))) / (2 * h)


def assert_grad_matches_fd(fn, x, n_dirs=3, seed=0, rtol=1e-3):
    """Compare autograd's directional derivative with central differences on random directions."""
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(n_dirs):
        d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        d /= d.norm()
        analytic = float((grad * d).sum())
        numeric = fd_directional(fn, x.detach(), d)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        assert rel <= rtol, f"directional derivative {analytic} vs FD {numeric} (rel {rel:.2e})"


@pytest.fixture
def tiny64():
    """Small float64 model for finite-difference checks (well under 5e4 parameters)."""
    return ToyLDM(TINY_CONFIG, seed=0).double()


@pytest.fixture
def tiny():
    return ToyLDM(TINY_CONFIG, seed=0)


@pytest.fixture
def images64():
    ident = data.Identity("circle", "red", "stripes")
    return torch.as_tensor(data.subject_images(ident, 2, seed=0)).double()


@pytest.fixture
def images():
    ident = data.Identity("square", "blue", "checker")
    return torch.as_tensor(data.subject_images(ident, 2, seed=1))


PRETRAIN = PretrainConfig()


@pytest.fixture(scope="session")
def pretrained(request):
    """The default toy model, trained once and cached in the pytest cache directory.

    Returns ``(model, stats)``; stats come from the held-out split.
    """
    key = hashlib.sha256(json.dumps(asdict(PRETRAIN), sort_keys=True, default=str).encode()).hexdigest()[:16]
    cache_dir = request.config.cache.mkdir("antidiff-pretrained")
    path = cache_dir / f"model-{key}.ckpt"
    if path.exists():
        manifest, _ = read_tensors(path)
        return load_model(path), manifest["meta"]["stats"]
    ds = data.generate_dataset(per_identity=8, seed=PRETRAIN.seed)
    train, held = ds.split(0.1, seed=PRETRAIN.seed)
    model, stats = pretrain_toy(train, PRETRAIN, held)
    save_model(model, path, meta={"stats": stats})
    # reload so the session sees exactly what the checkpoint stores
    return load_model(path), stats


# --------------------------------------------------------------------------- shared seed sweep

SWEEP_SEEDS = range(10)


@pytest.fixture(scope="session")
def default_sweep(pretrained):
    """Default protection, efficacy trial, edit probe and attention energies for ten seeds.

    Returns ``(outcomes, results, wall_seconds)``; computed once per session.
    """
    import time

    from antidiff.experiments import evaluate_seed
    from antidiff.pipeline import ProtectionConfig

    model, _ = pretrained
    t0 = time.perf_counter()
    pairs = [evaluate_seed(model, ProtectionConfig(), s) for s in SWEEP_SEEDS]
    return [o for o, _ in pairs], [r for _, r in pairs], time.perf_counter() - t0


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
