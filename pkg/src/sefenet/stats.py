"""Normality, homoscedasticity and paired comparisons with Bonferroni correction.

Pure-Python statistics: tail probabilities of Student's t and F come from a
regularized incomplete beta evaluated by Lentz's continued fraction, and
Shapiro-Wilk follows Royston's approximation (AS R94) for the coefficients
and the p-value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

__all__ = [
    "Sample",
    "betainc_reg",
    "student_t_sf",
    "f_sf",
    "shapiro_wilk",
    "levene",
    "paired_ttest",
    "bonferroni",
    "Comparison",
    "StatReport",
    "load_fixture_tables",
    "reproduce_paper_stats",
    "compare_models",
]

ALPHA_REPORT = 0.001
ALPHA_ASSUMPTIONS = 0.05
_STD_NORMAL = NormalDist()


@dataclass
class Sample:
    values: list[float]
    label: str = ""

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"sample {self.label!r} has non-finite values")

    def __len__(self):
        return len(self.values)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


def _as_sample(x, label="") -> Sample:
    return x if isinstance(x, Sample) else Sample(list(x), label)


# ---------------------------------------------------------------- special functions

def _betacf(a, b, x, max_iter=500, tol=1e-15):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc_reg needs a, b > 0")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1) / (a + b + 2):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-tailed ``P(|T| >= |t|)``."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def student_t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T >= t)``."""
    half = 0.5 * student_t_sf2(t, df)
    return half if t >= 0 else 1.0 - half


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail ``P(F >= f)`` of the F distribution."""
    if f <= 0:
        return 1.0
    return betainc_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


# ---------------------------------------------------------------- Shapiro-Wilk

def _poly(coefs, x):
    return sum(c * x**i for i, c in enumerate(coefs))


_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _sw_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights for ascending order statistics."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    m = np.array([_STD_NORMAL.inv_cdf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    summ2 = float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(n)
    a1 = _poly(_C1, rsn) + m[-1] / ssumm2
    if n > 5:
        a2 = _poly(_C2, rsn) + m[-2] / ssumm2
        fac = math.sqrt((summ2 - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
        a[2:-2] = m[2:-2] / fac
        a[-1], a[-2] = a1, a2
        a[0], a[1] = -a1, -a2
    else:
        fac = math.sqrt((summ2 - 2 * m[-1] ** 2) / (1 - 2 * a1**2))
        a[1:-1] = m[1:-1] / fac
        a[-1], a[0] = a1, -a1
    return a


def shapiro_wilk(sample) -> tuple[float, float]:
    """Shapiro-Wilk ``(W, p)`` for 3 <= n <= 5000."""
    x = np.sort(_as_sample(sample).array())
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={n}")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss <= 0 or x[-1] - x[0] < 1e-19 * max(1.0, abs(x[0])):
        raise ValueError("Shapiro-Wilk is undefined for a sample with identical values")
    a = _sw_coefficients(n)
    # center and scale first: W is invariant and this keeps cancellation out
    xs = (x - x.mean()) / math.sqrt(ss)
    w = min(float(np.dot(a, xs)) ** 2, 1.0)

    if n == 3:
        p = max(0.0, 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75))))
        return w, min(p, 1.0)
    w1 = math.log1p(-w) if w < 1 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return w, 1e-99
        y = -math.log(gamma - w1)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        y = w1
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    if math.isinf(y):
        return w, 1.0
    p = 1.0 - NormalDist(mean, sd).cdf(y)
    return w, p


# ---------------------------------------------------------------- Levene / t / Bonferroni

def levene(groups: Sequence, center: str = "mean") -> tuple[float, float]:
    """Levene's test on absolute deviations; ``center='median'`` gives Brown-Forsythe."""
    arrays = [_as_sample(g).array() for g in groups]
    k = len(arrays)
    if k < 2:
        raise ValueError("Levene's test needs at least 2 groups")
    if any(a.size < 2 for a in arrays):
        raise ValueError("every group needs at least 2 values")
    if center not in ("mean", "median"):
        raise ValueError("center must be 'mean' or 'median'")
    loc = np.mean if center == "mean" else np.median
    z = [np.abs(a - loc(a)) for a in arrays]
    n_i = np.array([a.size for a in z], dtype=float)
    n = n_i.sum()
    zbar_i = np.array([a.mean() for a in z])
    zbar = sum(a.sum() for a in z) / n
    between = float(np.sum(n_i * (zbar_i - zbar) ** 2))
    within = float(sum(np.sum((a - m) ** 2) for a, m in zip(z, zbar_i)))
    if within <= 0:
        if between <= 0:
            raise ValueError("Levene statistic is 0/0: no deviation within or between groups")
        return math.inf, 0.0
    stat = (n - k) / (k - 1) * between / within
    return stat, f_sf(stat, k - 1, n - k)


def paired_ttest(a, b) -> tuple[float, int, float]:
    """Paired t on ``a - b``: returns ``(t, df, two-tailed p)``."""
    a, b = _as_sample(a).array(), _as_sample(b).array()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0 or sd <= 1e-14 * max(1.0, float(np.max(np.abs(d)))):
        raise ValueError("paired differences have zero standard deviation; t is undefined")
    t = float(np.mean(d)) * math.sqrt(n) / sd
    df = n - 1
    return t, df, student_t_sf2(t, df)


def bonferroni(p_values: Sequence[float], k: int | None = None) -> list[float]:
    k = len(p_values) if k is None else k
    return [min(1.0, k * float(p)) for p in p_values]


# ---------------------------------------------------------------- reports

@dataclass
class Comparison:
    name: str
    label_a: str
    label_b: str
    shapiro_a: tuple[float, float]
    shapiro_b: tuple[float, float]
    shapiro_diff: tuple[float, float]
    levene: tuple[float, float]
    t: float
    df: int
    p_raw: float
    p_bonferroni: float = math.nan
    alpha: float = ALPHA_REPORT

    @property
    def significant(self) -> bool:
        return self.p_bonferroni < self.alpha

    @property
    def normality_ok(self) -> bool:
        return self.shapiro_a[1] >= ALPHA_ASSUMPTIONS and self.shapiro_b[1] >= ALPHA_ASSUMPTIONS

    @property
    def homoscedastic(self) -> bool:
        return self.levene[1] >= ALPHA_ASSUMPTIONS


@dataclass
class StatReport:
    comparisons: list[Comparison]
    k: int
    alpha: float = ALPHA_REPORT
    notes: list[str] = field(default_factory=list)

    @property
    def all_significant(self) -> bool:
        return all(c.significant for c in self.comparisons)

    def to_text(self) -> str:
        lines = [
            "[stat_report]",
            f"comparisons = {len(self.comparisons)}",
            f"bonferroni_k = {self.k}",
            f"alpha = {self.alpha:g}",
            f"all_significant = {str(self.all_significant).lower()}",
        ]
        for c in self.comparisons:
            lines += [
                "",
                f"[comparison.{c.name}]",
                f"a = {c.label_a}",
                f"b = {c.label_b}",
                f"shapiro_a_W = {c.shapiro_a[0]:.6f}",
                f"shapiro_a_p = {c.shapiro_a[1]:.6g}",
                f"shapiro_b_W = {c.shapiro_b[0]:.6f}",
                f"shapiro_b_p = {c.shapiro_b[1]:.6g}",
                f"shapiro_diff_W = {c.shapiro_diff[0]:.6f}",
                f"shapiro_diff_p = {c.shapiro_diff[1]:.6g}",
                f"levene_W = {c.levene[0]:.6g}",
                f"levene_p = {c.levene[1]:.6g}",
                f"t = {c.t:.6f}",
                f"df = {c.df}",
                f"p_raw = {c.p_raw:.6g}",
                f"p_bonferroni = {c.p_bonferroni:.6g}",
                f"normality_ok = {str(c.normality_ok).lower()}",
                f"homoscedastic = {str(c.homoscedastic).lower()}",
                f"significant = {str(c.significant).lower()}",
            ]
        if self.notes:
            lines += ["", "[notes]"] + [f"note{i} = {n}" for i, n in enumerate(self.notes, 1)]
        return "\n".join(lines) + "\n"


def compare(name, a: Sample, b: Sample) -> Comparison:
    """Assumption checks plus paired t of ``b`` against ``a`` (b - a)."""
    t, df, p = paired_ttest(b, a)
    diff = Sample(list(b.array() - a.array()), f"{b.label}-{a.label}")
    return Comparison(
        name=name,
        label_a=a.label,
        label_b=b.label,
        shapiro_a=shapiro_wilk(a),
        shapiro_b=shapiro_wilk(b),
        shapiro_diff=shapiro_wilk(diff),
        levene=levene([a, b]),
        t=t,
        df=df,
        p_raw=p,
    )


def compare_models(pairs: Sequence[tuple[str, Sample, Sample]], k: int | None = None,
                   alpha: float = ALPHA_REPORT) -> StatReport:
    comps = [compare(name, a, b) for name, a, b in pairs]
    k = len(comps) if k is None else k
    for c, p in zip(comps, bonferroni([c.p_raw for c in comps], k)):
        c.p_bonferroni = p
        c.alpha = alpha
    return StatReport(comps, k, alpha)


FIXTURE_BACKBONES = ("deep", "shallow", "eegnet")


def fixture_path(model_label: str) -> Path:
    return Path(str(resources.files("sefenet") / "fixtures" / f"{model_label}.csv"))


def load_fixture_tables(directory=None):
    """Published per-subject reports keyed by model label (``deep_sefe`` ...)."""
    from .training import LosoReport

    tables = {}
    for backbone in FIXTURE_BACKBONES:
        for variant in ("nosefe", "sefe"):
            label = f"{backbone}_{variant}"
            path = Path(directory) / f"{label}.csv" if directory else fixture_path(label)
            if not path.exists():
                raise FileNotFoundError(f"fixture {path} is missing")
            tables[label] = LosoReport.from_csv(path.read_text(), model=label)
    return tables


def reproduce_paper_stats(directory=None) -> StatReport:
    """Shapiro-Wilk, Levene and Bonferroni-corrected paired t (k=3) on the published tables."""
    tables = load_fixture_tables(directory)
    pairs = []
    for backbone in FIXTURE_BACKBONES:
        a, b = tables[f"{backbone}_nosefe"], tables[f"{backbone}_sefe"]
        if a.subjects != b.subjects:
            raise ValueError(f"{backbone}: fixture subject rows do not match")
        pairs.append((backbone, Sample(a.subject_averages(), a.model),
                      Sample(b.subject_averages(), b.model)))
    report = compare_models(pairs, k=len(pairs))
    for c in report.comparisons:
        if not c.significant:
            report.notes.append(
                f"{c.name}: corrected p = {c.p_bonferroni:.4g} is not below {c.alpha:g} "
                f"on n={c.df + 1} per-subject averages"
            )
            a, b = tables[f"{c.name}_nosefe"], tables[f"{c.name}_sefe"]
            t, df, p = paired_ttest(b.cells.ravel(), a.cells.ravel())
            report.notes.append(
                f"{c.name}: supplementary only, pooling all {df + 1} subject x repetition cells "
                f"gives t = {t:.4f}, corrected p = {min(1.0, report.k * p):.4g} "
                f"(repetitions are not independent samples)"
            )
    return report
