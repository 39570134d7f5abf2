"""Evaluation and benchmarking: speedup accounting, sweeps, and emitters.

Cost model: compute is proportional to the number of executed
transformer layers, so a sample exiting at layer j of n saves 1 - j/n of
the flops and the reported speedup is the per-sample average of that
ratio. Accuracy columns hold argmax accuracy for single-label tasks and
exact-set (subset) accuracy for multi-label; ``micro_f1`` is the
multi-label micro-averaged F1 and coincides with accuracy on
single-label tasks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Vocab, binarize_mlc
from .errors import ConfigError
from .model import MultiExitModel
from .policies import (
    EntropyThreshold,
    ExitPolicy,
    FixedExit,
    FPabee,
    LearnedConfidence,
    MaxProb,
    Pabee,
)
from .similarity import MLC, SLC, SimilarityMeasure

__all__ = [
    "PolicySpec",
    "EvalResult",
    "SweepResult",
    "CompareResult",
    "evaluate",
    "sweep",
    "pareto_curve",
    "emit_csv",
    "parse_csv",
    "emit_histogram",
    "emit_svg",
    "compare_policies",
]

POLICY_NAMES = ("fpabee", "pabee", "entropy", "maxprob", "learned", "fixed")


@dataclass(frozen=True)
class PolicySpec:
    """Declarative policy selection, mirroring the CLI flags.

    ``thre`` is the policy's scalar knob: the similarity threshold for
    fpabee, the entropy / probability / confidence threshold for the
    confidence family. ``fixed_layer`` selects the fixed policy's layer
    and ``patience`` the patience count for both patience policies.
    """

    policy: str
    measure: str = "jskd"
    thre: float | None = None
    patience: int | None = None
    fixed_layer: int | None = None
    kl_mode: bool = False

    def __post_init__(self):
        if self.policy not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICY_NAMES}")

    def build(self) -> ExitPolicy:
        if self.policy == "fpabee":
            if self.thre is None or self.patience is None:
                raise ConfigError("fpabee needs both --thre and --patience")
            measure = SimilarityMeasure(self.measure, subtract_self_entropy=self.kl_mode)
            return FPabee(measure, self.thre, self.patience)
        if self.policy == "pabee":
            if self.patience is None:
                raise ConfigError("pabee needs --patience")
            return Pabee(self.patience)
        if self.policy == "fixed":
            if self.fixed_layer is None:
                raise ConfigError("fixed needs --fixed-layer")
            return FixedExit(self.fixed_layer)
        if self.thre is None:
            raise ConfigError(f"{self.policy} needs --thre as its threshold")
        if self.policy == "entropy":
            return EntropyThreshold(self.thre)
        if self.policy == "maxprob":
            return MaxProb(self.thre)
        return LearnedConfidence(self.thre)

    def knob_value(self) -> float | None:
        if self.policy == "fixed":
            return float(self.fixed_layer) if self.fixed_layer is not None else None
        if self.policy == "pabee":
            return float(self.patience) if self.patience is not None else None
        return self.thre


@dataclass
class EvalResult:
    """Aggregate metrics for one policy configuration over one dataset."""

    spec: PolicySpec
    task: str
    n_samples: int
    accuracy: float
    micro_f1: float
    speedup: float
    mean_exit_layer: float
    histogram: list[int]

    @property
    def score(self) -> float:
        """The headline metric: accuracy (slc) or micro-F1 (mlc)."""
        return self.accuracy if self.task == SLC else self.micro_f1


@dataclass
class SweepResult:
    rows: list[EvalResult]
    n_layers: int
    seed: int
    model_hash: str
    data_hash: str


@dataclass
class CompareResult:
    spec: PolicySpec
    target_speedup: float
    result: EvalResult
    attained: bool


def _predictions_match(task: str, prob, example) -> bool:
    if task == SLC:
        return prob.argmax() == example.label
    return prob.label_set() == frozenset(example.labels)


def evaluate(
    model: MultiExitModel,
    dataset: Dataset,
    policy: ExitPolicy | PolicySpec,
    vocab: Vocab,
) -> EvalResult:
    """Run the early-exit forward pass sample by sample (batch size 1)."""
    if dataset.task != model.config.task:
        raise ConfigError(f"dataset task {dataset.task!r} does not match model task {model.config.task!r}")
    spec = policy if isinstance(policy, PolicySpec) else PolicySpec(policy.name)
    built = policy.build() if isinstance(policy, PolicySpec) else policy
    n = model.config.n_layers
    exits = np.zeros(len(dataset), dtype=np.int64)
    hits = 0
    tp = fp = fn = 0
    for i, ex in enumerate(dataset.examples):
        ids = vocab.encode(ex.text, max_len=model.config.max_seq_len)
        prob, exit_layer, _ = model.forward_early_exit(ids, built)
        exits[i] = exit_layer
        if _predictions_match(dataset.task, prob, ex):
            hits += 1
        if dataset.task == MLC:
            predicted = binarize_mlc(sorted(prob.label_set()), dataset.n_classes)
            actual = binarize_mlc(ex.labels, dataset.n_classes)
            tp += int(((predicted == 1) & (actual == 1)).sum())
            fp += int(((predicted == 1) & (actual == 0)).sum())
            fn += int(((predicted == 0) & (actual == 1)).sum())
    count = len(dataset)
    accuracy = hits / max(1, count)
    if dataset.task == SLC:
        micro_f1 = accuracy
    else:
        denom = 2 * tp + fp + fn
        micro_f1 = (2 * tp / denom) if denom else 1.0
    mean_exit = float(exits.mean()) if count else float(n)
    return EvalResult(
        spec=spec,
        task=dataset.task,
        n_samples=count,
        accuracy=accuracy,
        micro_f1=micro_f1,
        speedup=1.0 - mean_exit / n,
        mean_exit_layer=mean_exit,
        histogram=np.bincount(exits, minlength=n + 1)[1:].tolist(),
    )


def sweep(
    model: MultiExitModel,
    dataset: Dataset,
    specs: list[PolicySpec],
    vocab: Vocab,
    seed: int = 0,
) -> SweepResult:
    """One evaluation per grid point, rows sorted by ascending speedup."""
    rows = [evaluate(model, dataset, spec, vocab) for spec in specs]
    rows.sort(key=lambda r: r.speedup)
    return SweepResult(
        rows=rows,
        n_layers=model.config.n_layers,
        seed=seed,
        model_hash=model.param_hash(),
        data_hash=dataset.data_hash(),
    )


def pareto_curve(result: SweepResult | list[EvalResult]) -> list[tuple[float, float]]:
    """Non-dominated (speedup, score) points, speedup ascending."""
    rows = result.rows if isinstance(result, SweepResult) else result
    points = [(r.speedup, r.score) for r in rows]
    frontier = []
    for p in points:
        dominated = any(
            q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1]) for q in points
        )
        if not dominated and p not in frontier:
            frontier.append(p)
    frontier.sort()
    return frontier


# -- emitters -----------------------------------------------------------------


def _csv_header(n_layers: int) -> list[str]:
    return (
        ["policy", "measure", "thre", "patience", "accuracy", "micro_f1", "speedup", "mean_exit_layer"]
        + [f"hist_{i}" for i in range(1, n_layers + 1)]
        + ["seed", "model_hash", "data_hash"]
    )


def _fmt(value) -> str:
    return "" if value is None else repr(value) if isinstance(value, float) else str(value)


def emit_csv(result: SweepResult, path) -> None:
    """Write the sweep table; floats use repr so a re-parse is lossless."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(result.n_layers))
        for row in result.rows:
            spec = row.spec
            writer.writerow(
                [spec.policy, spec.measure if spec.policy == "fpabee" else "",
                 _fmt(spec.knob_value()), _fmt(spec.patience),
                 _fmt(row.accuracy), _fmt(row.micro_f1), _fmt(row.speedup),
                 _fmt(row.mean_exit_layer)]
                + [str(c) for c in row.histogram]
                + [str(result.seed), result.model_hash, result.data_hash]
            )


def parse_csv(path) -> SweepResult:
    """Inverse of :func:`emit_csv` (task is not stored; slc is assumed
    for scoring, which leaves the stored metric columns untouched)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        hist_cols = [h for h in header if h.startswith("hist_")]
        n_layers = len(hist_cols)
        rows = []
        seed, model_hash, data_hash = 0, "", ""
        for rec in reader:
            m = dict(zip(header, rec))
            spec = PolicySpec(
                policy=m["policy"],
                measure=m["measure"] or "jskd",
                thre=float(m["thre"]) if m["thre"] else None,
                patience=int(m["patience"]) if m["patience"] else None,
                fixed_layer=int(float(m["thre"])) if m["policy"] == "fixed" and m["thre"] else None,
            )
            rows.append(
                EvalResult(
                    spec=spec,
                    task=SLC,
                    n_samples=sum(int(m[h]) for h in hist_cols),
                    accuracy=float(m["accuracy"]),
                    micro_f1=float(m["micro_f1"]),
                    speedup=float(m["speedup"]),
                    mean_exit_layer=float(m["mean_exit_layer"]),
                    histogram=[int(m[h]) for h in hist_cols],
                )
            )
            seed = int(m["seed"])
            model_hash = m["model_hash"]
            data_hash = m["data_hash"]
    return SweepResult(rows, n_layers, seed, model_hash, data_hash)


def emit_histogram(result: EvalResult, path) -> None:
    """Exit-layer distribution for one configuration, one column per layer."""
    n = len(result.histogram)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "measure", "thre", "patience"] + [f"hist_{i}" for i in range(1, n + 1)])
        spec = result.spec
        writer.writerow(
            [spec.policy, spec.measure if spec.policy == "fpabee" else "",
             _fmt(spec.knob_value()), _fmt(spec.patience)]
            + [str(c) for c in result.histogram]
        )


_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def emit_svg(curves: list[tuple[str, list[tuple[float, float]]]], path,
             x_label: str = "speedup", y_label: str = "score") -> None:
    """Self-contained polyline chart; no external renderer needed."""
    width, height, margin = 640, 480, 60
    xs = [p[0] for _, pts in curves for p in pts]
    ys = [p[1] for _, pts in curves for p in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_pad = (x_hi - x_lo) * 0.05 or 0.05
    y_pad = (y_hi - y_lo) * 0.05 or 0.05
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" '
        f'font-size="14">{x_label}</text>',
        f'<text x="18" y="{height / 2:.1f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height / 2:.1f})">{y_label}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height - margin + 18}" text-anchor="middle" '
            f'font-size="11">{xv:.3g}</text>'
        )
        parts.append(
            f'<text x="{margin - 8}" y="{sy(yv):.1f}" text-anchor="end" '
            f'font-size="11">{yv:.3g}</text>'
        )
    for i, (label, pts) in enumerate(curves):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(
            f'<text x="{width - margin - 4}" y="{margin + 16 * i + 12}" text-anchor="end" '
            f'font-size="12" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


# -- matched-speedup comparison ------------------------------------------------


def _knob_bounds(policy: str, n_layers: int, n_classes: int) -> tuple[float, float, bool]:
    """(low, high, speedup_increases_with_knob) for each scalar knob."""
    if policy == "fpabee":
        return 0.0, 80.0, True
    if policy == "entropy":
        return 0.0, np.log(max(2, n_classes)) + 1.0, True
    if policy in ("maxprob", "learned"):
        return 0.0, 1.0, False
    raise ConfigError(f"policy {policy!r} has no continuous knob")


def _with_knob(spec: PolicySpec, knob: float) -> PolicySpec:
    return replace(spec, thre=knob)


def compare_policies(
    model: MultiExitModel,
    dataset: Dataset,
    target_speedup: float,
    specs: list[PolicySpec],
    vocab: Vocab,
    tolerance: float = 0.02,
    max_iters: int = 30,
) -> list[CompareResult]:
    """Tune each policy's scalar knob to land within ``tolerance`` of the
    target speedup and report its score there.

    fpabee and the confidence family are bisected on their continuous
    threshold; pabee enumerates its integer patience; fixed picks the
    nearest layer. Policies that cannot reach the target are reported
    with ``attained=False`` at their closest achievable point.
    """
    n = model.config.n_layers
    out: list[CompareResult] = []
    for spec in specs:
        if spec.policy == "fixed":
            layer = int(np.clip(round(n * (1.0 - target_speedup)), 1, n))
            best = evaluate(model, dataset, replace(spec, fixed_layer=layer), vocab)
        elif spec.policy == "pabee":
            best = None
            for patience in range(1, n + 1):
                res = evaluate(model, dataset, replace(spec, patience=patience), vocab)
                if best is None or abs(res.speedup - target_speedup) < abs(best.speedup - target_speedup):
                    best = res
                if abs(res.speedup - target_speedup) <= tolerance:
                    break
        else:
            lo, hi, increasing = _knob_bounds(spec.policy, n, dataset.n_classes)
            best = None

            def probe(knob: float) -> EvalResult:
                nonlocal best
                res = evaluate(model, dataset, _with_knob(spec, knob), vocab)
                if best is None or abs(res.speedup - target_speedup) < abs(best.speedup - target_speedup):
                    best = res
                return res

            # endpoints realize the never-halt / always-halt extremes
            probe(lo)
            if abs(best.speedup - target_speedup) > tolerance:
                probe(hi)
            for _ in range(max_iters):
                if abs(best.speedup - target_speedup) <= tolerance:
                    break
                mid = (lo + hi) / 2.0
                res = probe(mid)
                overshoot = res.speedup > target_speedup
                if overshoot == increasing:
                    hi = mid
                else:
                    lo = mid
            assert best is not None
        out.append(
            CompareResult(
                spec=best.spec,
                target_speedup=target_speedup,
                result=best,
                attained=abs(best.speedup - target_speedup) <= tolerance,
            )
        )
    return out
