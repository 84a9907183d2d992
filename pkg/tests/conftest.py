import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mts_lab.data import BarSeries, build_panel
from mts_lab.synthetic import business_days, generate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_series(n: int, seed: int = 0, ticker: str = "AAA", start=dt.date(2020, 1, 6)) -> BarSeries:
    rng = np.random.default_rng(seed)
    close = 50.0 * np.exp(np.cumsum(rng.normal(0, 0.02, n)))
    opens = close * np.exp(rng.normal(0, 0.005, n))
    high = np.maximum(opens, close) * (1 + rng.uniform(0, 0.01, n))
    low = np.minimum(opens, close) * (1 - rng.uniform(0, 0.01, n))
    vol = rng.uniform(1e5, 1e6, n)
    return BarSeries(ticker, business_days(start, n), opens, high, low, close, vol)


@pytest.fixture
def flat_panel():
    series = generate("flat", 60, n_stocks=5)
    return build_panel(series[:-1], index=series[-1])


@pytest.fixture
def random_panel():
    stocks = [random_series(300, seed=k, ticker=f"S{k}") for k in range(3)]
    index = random_series(300, seed=99, ticker="IDX")
    return build_panel(stocks, index=index)


def price_panel(prices, volumes=None, index=None) -> "Panel":
    """Panel straight from a (T, n) price matrix; features carry only the price column."""
    from mts_lab.data import Panel

    prices = np.asarray(prices, dtype=np.float64)
    T, n = prices.shape
    feats = np.zeros((T, n, 9))
    feats[:, :, 1] = prices
    vols = np.full((T, n), 1e6) if volumes is None else np.asarray(volumes, dtype=np.float64)
    return Panel(business_days(dt.date(2021, 1, 4), T), [f"S{k}" for k in range(n)], prices, vols, feats,
                 None if index is None else np.asarray(index, dtype=np.float64), None if index is None else "IDX")


def grad_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> tuple[float, float]:
    """(max elementwise relative error, norm-relative error) between two gradients."""
    a, b = np.asarray(analytic, float), np.asarray(numeric, float)
    elem = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    scale = np.linalg.norm(b)
    norm = np.linalg.norm(a - b) / scale if scale > 0 else float(np.linalg.norm(a - b))
    return float(elem.max(initial=0.0)), float(norm)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context-manager factory that times a criterion and records one PASS/FAIL line."""
    import contextlib
    import time

    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    @contextlib.contextmanager
    def run(number: int, title: str, budget_s: float | None = None):
        t0 = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - t0
            if budget_s is not None:
                assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s} s"
        except BaseException:
            lines.append((number, f"FAIL  {number:>2}. {title} ({time.perf_counter() - t0:.1f} s)"))
            print(lines[-1][1])
            raise
        lines.append((number, f"PASS  {number:>2}. {title} ({elapsed:.1f} s)"))
        print(lines[-1][1])

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
