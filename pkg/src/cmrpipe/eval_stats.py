"""Overlap metrics and method-agreement statistics.

Self-contained implementations (no scipy at runtime): Student-t and
chi-squared tail probabilities go through the regularized incomplete
beta/gamma functions below, which are continued-fraction/series evaluations
verified against an independent oracle fixture grid in the tests.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation, DegenerateDataError

_MAX_ITER = 300
_FPMIN = 1e-300
_EPS = 3e-16


@dataclass
class AgreementStats:
    """Bland-Altman bias/limits plus paired-comparison statistics."""

    bias: float
    loa_low: float
    loa_high: float
    n: int
    pearson_r: float | None = None
    t_stat: float | None = None
    p_value: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- overlap

def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a&b|/(|a|+|b|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks -> 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


# ------------------------------------------------------- special functions

def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz continued fraction for the incomplete beta function.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ContractViolation("betainc requires a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def gammaincc_regularized(s: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(s, x) for s > 0, x >= 0."""
    if s <= 0:
        raise ContractViolation("gammaincc requires s > 0")
    if x < 0:
        raise ContractViolation("gammaincc requires x >= 0")
    if x == 0.0:
        return 1.0
    if x < s + 1.0:
        # Lower series, then complement.
        ap = s
        total = 1.0 / s
        term = total
        for _ in range(_MAX_ITER):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        else:
            raise ArithmeticError("incomplete gamma series did not converge")
        p = total * math.exp(-x + s * math.log(x) - math.lgamma(s))
        return 1.0 - p
    # Upper continued fraction (modified Lentz).
    b = x + 1.0 - s
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return h * math.exp(-x + s * math.log(x) - math.lgamma(s))


def student_t_sf2(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t with dof degrees of freedom."""
    if dof < 1:
        raise ContractViolation("t distribution needs dof >= 1")
    x = dof / (dof + t * t)
    return betainc_regularized(dof / 2.0, 0.5, x)


# ------------------------------------------------------------ agreement

def _differences(pairs) -> np.ndarray:
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ContractViolation("pairs must be a sequence of (x, y)")
    return arr[:, 0] - arr[:, 1]


def bland_altman(pairs) -> AgreementStats:
    """Bias and 95% limits of agreement of the differences x - y.

    Limits use the conventional 1.96 multiplier on the sample (n-1) SD.
    """
    d = _differences(pairs)
    n = d.size
    if n < 2:
        raise DegenerateDataError("Bland-Altman needs at least 2 pairs")
    bias = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    return AgreementStats(bias=bias, loa_low=bias - 1.96 * sd,
                          loa_high=bias + 1.96 * sd, n=n)


def paired_t_test(pairs) -> tuple[float, float]:
    """Paired t-test of the differences; returns (t, two-sided p)."""
    d = _differences(pairs)
    n = d.size
    if n < 2:
        raise DegenerateDataError("paired t-test needs at least 2 pairs")
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateDataError("degenerate differences (zero variance)")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return t, student_t_sf2(t, n - 1)


def pearson_r(pairs) -> float:
    """Sample Pearson correlation of the pair sequence."""
    arr = np.asarray(list(pairs), dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ContractViolation("pairs must be a sequence of (x, y)")
    if arr.shape[0] < 2:
        raise DegenerateDataError("pearson r needs at least 2 pairs")
    x = arr[:, 0] - arr[:, 0].mean()
    y = arr[:, 1] - arr[:, 1].mean()
    sx = float(np.sqrt(np.sum(x * x)))
    sy = float(np.sqrt(np.sum(y * y)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateDataError("pearson r undefined for zero variance")
    return float(np.sum(x * y)) / (sx * sy)


def chi_squared(table) -> tuple[float, float]:
    """Pearson chi-squared test of independence on a 2D contingency table."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2:
        raise ContractViolation("chi-squared expects a 2D table of counts")
    r, c = obs.shape
    dof = (r - 1) * (c - 1)
    if dof < 1:
        raise DegenerateDataError("chi-squared needs at least a 2x2 table")
    row = obs.sum(axis=1)
    col = obs.sum(axis=0)
    total = obs.sum()
    if np.any(row <= 0) or np.any(col <= 0):
        raise DegenerateDataError("zero marginal in contingency table")
    expected = np.outer(row, col) / total
    chi2 = float(np.sum((obs - expected) ** 2 / expected))
    return chi2, gammaincc_regularized(dof / 2.0, chi2 / 2.0)


def agreement_stats(pairs) -> AgreementStats:
    """Full agreement record: Bland-Altman plus Pearson r and paired t-test."""
    out = bland_altman(pairs)
    out.pearson_r = pearson_r(pairs)
    out.t_stat, out.p_value = paired_t_test(pairs)
    return out


# ---------------------------------------------------------------- plots

def save_agreement_plots(pairs, out_prefix: str, label: str = "value") -> list[str]:
    """Write Bland-Altman and correlation scatter SVGs; returns written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arr = np.asarray(list(pairs), dtype=float)
    stats = bland_altman(arr)
    mean = arr.mean(axis=1)
    diff = arr[:, 0] - arr[:, 1]
    written = []

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(mean, diff, s=14, alpha=0.8)
    for y, style in ((stats.bias, "-"), (stats.loa_low, "--"), (stats.loa_high, "--")):
        ax.axhline(y, color="gray", linestyle=style, linewidth=1)
    ax.set_xlabel(f"mean {label}")
    ax.set_ylabel("difference")
    ax.set_title("Bland-Altman")
    path = f"{out_prefix}_bland_altman.svg"
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(arr[:, 0], arr[:, 1], s=14, alpha=0.8)
    lims = [min(arr.min(), 0), arr.max() * 1.05]
    ax.plot(lims, lims, color="gray", linewidth=1)
    ax.set_xlabel(f"{label} (method A)")
    ax.set_ylabel(f"{label} (method B)")
    try:
        r = pearson_r(arr)
        ax.set_title(f"r = {r:.3f}")
    except DegenerateDataError:
        ax.set_title("correlation undefined")
    path = f"{out_prefix}_scatter.svg"
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written
