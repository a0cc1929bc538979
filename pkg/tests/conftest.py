import numpy as np
import pytest

from ivfactor.gmm import GmmUbm, SuffStats


def random_ubm(rng, C, F, full=False, spread=2.0):
    w = rng.dirichlet(np.full(C, 5.0))
    means = spread * rng.standard_normal((C, F))
    if full:
        A = rng.standard_normal((C, F, F))
        covs = np.einsum("cij,ckj->cik", A, A) / F + 0.5 * np.eye(F)
    else:
        covs = rng.uniform(0.5, 1.5, size=(C, F))
    return GmmUbm(w / w.sum(), means, covs, full=full)


def random_stats(rng, C, F, U, scale=1.0, labels=None):
    """Synthetic (n, f_norm) statistics; f is left at zero since only f_norm is used downstream."""
    out = []
    for u in range(U):
        n = rng.uniform(0.5, 20.0, size=C) * scale
        f_norm = rng.standard_normal((C, F)) * np.sqrt(n)[:, None]
        spk = None if labels is None else labels[u]
        out.append(SuffStats(n, np.zeros((C, F)), f_norm, float(n.sum()), f"u{u:03d}", spk))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run even when output is captured
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
