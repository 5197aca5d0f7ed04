"""Result aggregation, per-image win counts and the one-sided binomial test."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .errors import DomainError, EmptyGroup, UnknownFormat

FORMATS = ("markdown", "csv", "json")
UNDEFINED = "—"
_EXACT_MAX_N = 2000
_LOG_SPACE_MAX_N = 10**6


# -- types ------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonPair:
    image_id: str
    score_a: float
    score_b: float
    metric: str = ""
    dataset: str = ""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score_a) and math.isfinite(self.score_b)):
            raise ValueError(f"non-finite score for image {self.image_id}")


@dataclass(frozen=True)
class WinSummary:
    wins_a: int
    wins_b: int
    ties: int = 0

    def __post_init__(self) -> None:
        if min(self.wins_a, self.wins_b, self.ties) < 0:
            raise ValueError("win counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.wins_a + self.wins_b + self.ties

    @property
    def decided(self) -> int:
        return self.wins_a + self.wins_b

    @property
    def preference_a(self) -> float:
        """Share of decided comparisons won by A, in percent."""
        return 100.0 * self.wins_a / self.decided if self.decided else float("nan")

    def __add__(self, other: WinSummary) -> WinSummary:
        return WinSummary(self.wins_a + other.wins_a, self.wins_b + other.wins_b, self.ties + other.ties)


@dataclass(frozen=True)
class ScoreRow:
    dataset: str
    metric: str
    method: str
    score: float
    image_id: str = ""


@dataclass(frozen=True)
class AggregateRow:
    key: tuple[str, ...]
    n: int
    mean: float
    std: float | None  # sample std; None for a single value

    def render(self) -> str:
        std = UNDEFINED if self.std is None else f"{self.std:.3f}"
        return f"{self.mean:.2f} ± {std}"


# -- operations -------------------------------------------------------------


def aggregate(rows: Iterable[ScoreRow], group_by: Sequence[str] = ("dataset", "metric", "method")) -> list[AggregateRow]:
    rows = list(rows)
    if not rows:
        raise EmptyGroup("nothing to aggregate")
    groups: dict[tuple[str, ...], list[float]] = defaultdict(list)
    for row in rows:
        groups[tuple(getattr(row, k) for k in group_by)].append(row.score)
    out = []
    for key in sorted(groups):
        # sort values so the float sums do not depend on input order
        values = sorted(groups[key])
        mean = math.fsum(values) / len(values)
        std = statistics.stdev(values) if len(values) > 1 else None
        out.append(AggregateRow(key, len(values), mean, std))
    return out


def win_counts(pairs: Iterable[ComparisonPair]) -> WinSummary:
    a = b = t = 0
    for p in pairs:
        if p.score_a > p.score_b:
            a += 1
        elif p.score_b > p.score_a:
            b += 1
        else:
            t += 1
    return WinSummary(a, b, t)


def _logsumexp(values: list[float]) -> float:
    top = max(values)
    return top + math.log(math.fsum(math.exp(v - top) for v in values))


def binomial_one_sided(k: int, n: int) -> float:
    """P(X >= k) for X ~ Binomial(n, 1/2), summed exactly term by term.

    Up to n = 2000 the tail is an exact integer ratio, rounded once to float.
    Beyond that each term is formed in log space and combined with a
    log-sum-exp, which keeps full double precision without any normal
    approximation.
    """
    if isinstance(k, bool) or isinstance(n, bool) or int(k) != k or int(n) != n:
        raise DomainError("k and n must be integers")
    k, n = int(k), int(n)
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if n > _LOG_SPACE_MAX_N:
        raise DomainError(f"n={n} exceeds the supported maximum of {_LOG_SPACE_MAX_N}")
    if k == 0:
        return 1.0
    return _tail_exact(k, n) if n <= _EXACT_MAX_N else _tail_log(k, n)


def _tail_exact(k: int, n: int) -> float:
    # walk down from C(n, n) = 1 with C(n, i-1) = C(n, i) * i / (n - i + 1)
    term = tail = 1
    for i in range(n, k, -1):
        term = term * i // (n - i + 1)
        tail += term
    return tail / (1 << n)  # int/int true division is correctly rounded


def _tail_log(k: int, n: int) -> float:
    log_half_n = n * math.log(2.0)
    lg_n = math.lgamma(n + 1)
    terms = [lg_n - math.lgamma(i + 1) - math.lgamma(n - i + 1) - log_half_n for i in range(k, n + 1)]
    return min(1.0, math.exp(_logsumexp(terms)))


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class WinTable:
    rows: tuple[tuple[str, WinSummary], ...]
    method_a: str = "A"
    method_b: str = "B"

    @property
    def totals(self) -> WinSummary:
        total = WinSummary(0, 0, 0)
        for _, s in self.rows:
            total = total + s
        return total

    @property
    def p_value(self) -> float:
        t = self.totals
        return binomial_one_sided(t.wins_a, t.decided) if t.decided else 1.0


def win_table_from_pairs(pairs: Iterable[ComparisonPair], method_a: str = "A", method_b: str = "B") -> WinTable:
    by_dataset: dict[str, list[ComparisonPair]] = defaultdict(list)
    for p in pairs:
        by_dataset[p.dataset].append(p)
    if not by_dataset:
        raise EmptyGroup("no comparison pairs")
    return WinTable(tuple((d, win_counts(ps)) for d, ps in sorted(by_dataset.items())), method_a, method_b)


def win_table_from_counts(doc: Mapping[str, Any]) -> WinTable:
    """Build a table from ``{"method_a", "method_b", "datasets": [{dataset, wins_a, wins_b, ties?}]}``."""
    rows = tuple(
        (str(r["dataset"]), WinSummary(int(r["wins_a"]), int(r["wins_b"]), int(r.get("ties", 0))))
        for r in doc.get("datasets", [])
    )
    if not rows:
        raise EmptyGroup("no per-dataset counts")
    return WinTable(rows, doc.get("method_a", "A"), doc.get("method_b", "B"))


def _pct(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.1f}"


def _win_records(table: WinTable) -> list[dict[str, Any]]:
    out = []
    for name, s in (*table.rows, ("Total", table.totals)):
        out.append(
            {
                "dataset": name,
                "wins_a": s.wins_a,
                "wins_b": s.wins_b,
                "ties": s.ties,
                "total": s.total,
                "preference_a_pct": _pct(s.preference_a),
            }
        )
    return out


def render_win_table(table: WinTable, fmt: str) -> str:
    if fmt not in FORMATS:
        raise UnknownFormat(fmt)
    records = _win_records(table)
    p = table.p_value
    if fmt == "json":
        doc = {
            "method_a": table.method_a,
            "method_b": table.method_b,
            "rows": records[:-1],
            "total": records[-1],
            "binomial_one_sided_p": p,
        }
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["dataset", table.method_a, table.method_b, "ties", "total", "pref_a_pct"])
        for r in records:
            writer.writerow([r["dataset"], r["wins_a"], r["wins_b"], r["ties"], r["total"], r["preference_a_pct"]])
        writer.writerow(["binomial_one_sided_p", repr(p), "", "", "", ""])
        return buf.getvalue()
    lines = [
        f"| Dataset | {table.method_a} | {table.method_b} | Ties | Total | Pref. (%) |",
        "|---|---:|---:|---:|---:|---:|",
    ]
    for r in records:
        name = f"**{r['dataset']}**" if r is records[-1] else r["dataset"]
        lines.append(f"| {name} | {r['wins_a']} | {r['wins_b']} | {r['ties']} | {r['total']} | {r['preference_a_pct']} |")
    lines.append("")
    lines.append(f"One-sided binomial test (H1: {table.method_a} preferred): p = {p:.4g}")
    return "\n".join(lines) + "\n"


def render_aggregate(rows: Sequence[AggregateRow], group_by: Sequence[str], fmt: str) -> str:
    if fmt not in FORMATS:
        raise UnknownFormat(fmt)
    if fmt == "json":
        doc = [{**dict(zip(group_by, r.key)), "n": r.n, "mean": r.mean, "std": r.std} for r in rows]
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow([*group_by, "n", "mean", "std"])
        for r in rows:
            writer.writerow([*r.key, r.n, repr(r.mean), "" if r.std is None else repr(r.std)])
        return buf.getvalue()
    lines = ["| " + " | ".join([*group_by, "n", "score"]) + " |", "|" + "---|" * (len(group_by) + 2)]
    for r in rows:
        lines.append("| " + " | ".join([*r.key, str(r.n), r.render()]) + " |")
    return "\n".join(lines) + "\n"


def generation_summary(records) -> list[dict[str, Any]]:
    out = []
    for rec in records:
        scores = [ind.mean_score for ind in rec.population]
        out.append(
            {
                "generation": rec.generation_index,
                "best": max(scores),
                "mean": math.fsum(scores) / len(scores),
                "t2i_images": rec.t2i_images,
                "vlm_calls": rec.total_vlm_calls,
                "cache_hits": rec.cache_hits,
            }
        )
    return out


def render_generation_summary(rows: list[dict[str, Any]], fmt: str) -> str:
    if fmt not in FORMATS:
        raise UnknownFormat(fmt)
    cols = ["generation", "best", "mean", "t2i_images", "vlm_calls", "cache_hits"]
    if fmt == "json":
        return json.dumps(rows, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()
    lines = ["| " + " | ".join(cols) + " |", "|" + "---:|" * len(cols)]
    for r in rows:
        lines.append(
            f"| {r['generation']} | {r['best']:.4f} | {r['mean']:.4f} | {r['t2i_images']} | {r['vlm_calls']} | {r['cache_hits']} |"
        )
    return "\n".join(lines) + "\n"


def _scatter_csv(pairs: Sequence[ComparisonPair]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["image_id", "dataset", "metric", "score_a", "score_b"])
    for p in pairs:
        writer.writerow([p.image_id, p.dataset, p.metric, repr(p.score_a), repr(p.score_b)])
    return buf.getvalue()


_EXT = {"markdown": "md", "csv": "csv", "json": "json"}


def load_comparison_input(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def emit_report(source: str | Path | Mapping[str, Any], fmt: str, out_dir: str | Path | None = None) -> list[Path]:
    """Write report files for a run directory or a comparison document.

    A comparison document has either ``datasets`` (per-dataset win counts) or
    ``pairs`` (per-image scores). Run directories get a per-generation summary
    under their ``reports/`` folder. Returns the written paths.
    """
    if fmt not in FORMATS:
        raise UnknownFormat(fmt)
    ext = _EXT[fmt]
    written: list[Path] = []

    if isinstance(source, (str, Path)) and Path(source).is_dir():
        from .runstore import load_generations

        run_dir = Path(source)
        records = load_generations(run_dir)
        if not records:
            raise EmptyGroup(f"{run_dir} has no generation records")
        out = Path(out_dir) if out_dir else run_dir / "reports"
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"generations.{ext}"
        path.write_text(render_generation_summary(generation_summary(records), fmt), encoding="utf-8", newline="")
        return [path]

    if isinstance(source, (str, Path)):
        base = Path(source).parent
        doc = load_comparison_input(source)
    else:
        base = Path(".")
        doc = dict(source)
    out = Path(out_dir) if out_dir else base / "reports"
    out.mkdir(parents=True, exist_ok=True)

    if "pairs" in doc:
        pairs = [ComparisonPair(**p) for p in doc["pairs"]]
        table = win_table_from_pairs(pairs, doc.get("method_a", "A"), doc.get("method_b", "B"))
        scatter = out / "scatter.csv"
        scatter.write_text(_scatter_csv(pairs), encoding="utf-8", newline="")
        written.append(scatter)
    elif "datasets" in doc:
        table = win_table_from_counts(doc)
    else:
        raise EmptyGroup("comparison input needs 'pairs' or 'datasets'")
    path = out / f"wins.{ext}"
    path.write_text(render_win_table(table, fmt), encoding="utf-8", newline="")
    written.insert(0, path)
    return written


def summary_dict(table: WinTable) -> dict[str, Any]:
    t = table.totals
    return {**asdict(t), "total": t.total, "preference_a_pct": round(t.preference_a, 1), "p_value": table.p_value}
