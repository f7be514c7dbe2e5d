import numpy as np
import pytest

from drdidsc.data import PanelDataset, RepeatedCrossSection, StaggeredDesign


def make_panel(n=300, G=4, T=None, seed=0, d=1, discrete=None, y=None, group=None):
    """Random panel with smooth group-specific trends in a continuous x."""
    rng = np.random.default_rng(seed)
    T = T or G
    if group is None:
        group = np.concatenate([np.arange(1, G + 1), rng.integers(1, G + 1, n - G)])
    x = rng.uniform(0, 1, (n, d))
    if y is None:
        x1 = x[:, :1] if d else np.full((n, 1), 0.5)
        trend = np.arange(1, T + 1)[None, :] * (0.3 * group[:, None] + x1)
        y = trend + np.sin(3 * x1 * np.arange(1, T + 1)) + rng.normal(0, 0.3, (n, T))
    disc = np.zeros((n, 0), dtype=object) if discrete is None else np.asarray(discrete, dtype=object).reshape(n, -1)
    return PanelDataset(
        unit_ids=np.arange(n),
        group=group,
        x=x,
        discrete=disc,
        y=y,
        group_labels=tuple(str(g) for g in range(1, G + 1)),
        periods=tuple(range(1, T + 1)),
        continuous_names=tuple(f"x{j}" for j in range(d)),
        discrete_names=tuple(f"d{j}" for j in range(disc.shape[1])),
    )


def make_rc(n=600, G=3, T=3, seed=0):
    rng = np.random.default_rng(seed)
    group = np.concatenate([np.arange(1, G + 1), rng.integers(1, G + 1, n - G)])
    time = np.concatenate([np.arange(1, T + 1), rng.integers(1, T + 1, n - T)])
    x = rng.uniform(0, 1, (n, 1))
    y = time * (0.2 * group + x[:, 0]) + rng.normal(0, 0.3, n)
    return RepeatedCrossSection(
        y=y,
        group=group,
        time=time,
        x=x,
        discrete=np.zeros((n, 0), dtype=object),
        group_labels=tuple(str(g) for g in range(1, G + 1)),
        periods=tuple(range(1, T + 1)),
        continuous_names=("x0",),
    )


def staggered_panel(sizes, gammas, effects, T=6, seed=0, noise=0.3):
    """Group effects plus common x-dependent trends, so parallel trends holds;
    cohort g gains effects[g](e) from period gamma(g) + e onward."""
    rng = np.random.default_rng(seed)
    group = np.repeat(np.arange(1, len(sizes) + 1), sizes)
    n = len(group)
    x = rng.uniform(0, 1, (n, 1))
    t = np.arange(1, T + 1)[None, :]
    y = 0.5 * group[:, None] + t * x + np.sin(2 * x * t) + rng.normal(0, noise, (n, T))
    for g, gam in enumerate(gammas, start=1):
        if np.isfinite(gam):
            for e in range(0, T - int(gam) + 1):
                y[group == g, int(gam) + e - 1] += effects[g](e)
    ds = PanelDataset(
        unit_ids=np.arange(n),
        group=group,
        x=x,
        discrete=np.zeros((n, 0), dtype=object),
        y=y,
        group_labels=tuple(str(g) for g in range(1, len(sizes) + 1)),
        periods=tuple(range(1, T + 1)),
    )
    return ds, StaggeredDesign(dict(enumerate(gammas, start=1)))


@pytest.fixture
def panel():
    return make_panel()


@pytest.fixture
def rc():
    return make_rc()


ACCEPTANCE = {}


def record(number, ok, detail):
    """Log one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
