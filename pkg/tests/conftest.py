import numpy as np
import pytest
from scipy.special import expit

from ddr.data import Standardization
from ddr.network import ArchSpec, DdrModel


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


class Rigged:
    """Duck-typed model with closed-form Q and F; everything standardized."""

    def __init__(self, q=None, f=None, ytilde_min=-1.0, ytilde_max=1.0, d=1):
        self._q = q or (lambda tau, x: np.zeros(x.shape[0]) + tau)
        self._f = f or (lambda y, x: expit(np.zeros(x.shape[0]) + y))
        self.stats = Standardization.identity(d, ytilde_min, ytilde_max)

    def q_forward(self, tau, x):
        x = _rows(x)
        return np.asarray(self._q(np.asarray(tau, dtype=np.float64), x), dtype=np.float64) + np.zeros(x.shape[0])

    def f_forward(self, ytilde, x):
        x = _rows(x)
        p = np.asarray(self._f(np.asarray(ytilde, dtype=np.float64), x), dtype=np.float64) + np.zeros(x.shape[0])
        p = np.clip(p, 1e-300, 1 - 2 ** -53)
        return np.log(p) - np.log1p(-p), p


@pytest.fixture
def rigged():
    return Rigged


def small_model(seed=0, d=2, widths=(4, 4), reg=(4,), injection="linear", scale=1.0):
    rng = np.random.default_rng(seed)
    arch = ArchSpec(d, list(widths), list(reg), injection=injection)
    m = DdrModel.initialize(arch, rng, Standardization.identity(d, -2.0, 2.0))
    for k in m.params:
        m.params[k] = m.params[k] * scale + (rng.normal(0, 0.1, m.params[k].shape) if k.endswith("b") else 0.0)
    return m


@pytest.fixture
def make_model():
    return small_model


def pytest_configure(config):
    config._ddr_acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_ddr_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
