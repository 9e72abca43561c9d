"""GUESS-18 questionnaire scoring and the accompanying session statistics.

The questionnaire has nine constructs with two items each on a 1..5
agreement scale.  A subscale score is the mean of its two items and the
overall score is the sum of the nine subscale scores, so a complete
response always lands in [9, 45].  Negatively worded items are
reverse-coded (x -> 6-x on the default scale) before any score is
computed.

The item order and the item-to-construct mapping ship as an editable
sidecar file (data/guess18_map.json) so a deviating questionnaire print
can be described without touching code.  Missing answers are tolerated:
a subscale with a missing item is missing, an overall with a missing
subscale is missing, item descriptives drop missing cells pairwise, and
Cronbach's alpha drops incomplete rows listwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

N_ITEMS = 18
SEXES = ("f", "m", "missing")

DEFAULT_MAP_RESOURCE = "guess18_map.json"


class SurveyFormatError(Exception):
    """A survey file or matrix does not have the documented shape."""


class DegenerateError(Exception):
    """Reliability is undefined: zero total variance or too little data."""


class EmptyGroup(Exception):
    """A rank test needs at least one observation on each side."""


# ---------------------------------------------------------------------------
# Subscale map


@dataclass(frozen=True)
class Construct:
    key: str
    label: str
    items: tuple[str, str]


@dataclass(frozen=True)
class SubscaleMap:
    """Which item belongs to which construct, and what gets reverse-coded."""

    scale_min: int
    scale_max: int
    constructs: tuple[Construct, ...]
    reverse: frozenset[str]

    def __post_init__(self) -> None:
        seen: list[str] = []
        for construct in self.constructs:
            if len(construct.items) != 2:
                raise SurveyFormatError(
                    f"construct '{construct.key}' must have exactly 2 items"
                )
            seen.extend(construct.items)
        if len(seen) != len(set(seen)):
            raise SurveyFormatError("an item appears in more than one construct")
        if not self.reverse <= set(seen):
            unknown = sorted(self.reverse - set(seen))
            raise SurveyFormatError(f"reverse list names unknown items {unknown}")
        if self.scale_min >= self.scale_max:
            raise SurveyFormatError("scale_min must be below scale_max")

    @property
    def item_order(self) -> tuple[str, ...]:
        return tuple(item for construct in self.constructs for item in construct.items)

    @property
    def construct_keys(self) -> tuple[str, ...]:
        return tuple(construct.key for construct in self.constructs)

    def recode_value(self, value: int) -> int:
        return self.scale_min + self.scale_max - value


def load_subscale_map(text: str) -> SubscaleMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SurveyFormatError(f"subscale map is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SurveyFormatError("subscale map must be a JSON object")
    try:
        scale = doc["scale"]
        constructs = tuple(
            Construct(c["key"], c.get("label", c["key"]), tuple(c["items"]))
            for c in doc["constructs"]
        )
        reverse = frozenset(doc["reverse"])
        return SubscaleMap(int(scale["min"]), int(scale["max"]), constructs, reverse)
    except (KeyError, TypeError) as exc:
        raise SurveyFormatError(f"subscale map is missing fields: {exc}") from exc


@lru_cache(maxsize=1)
def default_map() -> SubscaleMap:
    text = resources.files("classplay.data").joinpath(DEFAULT_MAP_RESOURCE).read_text("utf-8")
    return load_subscale_map(text)


# ---------------------------------------------------------------------------
# Matrix


@dataclass(frozen=True)
class Respondent:
    respondent_id: str
    sex: str
    answers: tuple[int | None, ...]


@dataclass(frozen=True)
class SurveyMatrix:
    """Respondents by items; answers are 1..5 integers or None for missing."""

    items: tuple[str, ...]
    rows: tuple[Respondent, ...]

    def __post_init__(self) -> None:
        if len(self.items) != N_ITEMS:
            raise SurveyFormatError(f"expected {N_ITEMS} item columns, got {len(self.items)}")
        if len(set(self.items)) != N_ITEMS:
            raise SurveyFormatError("item columns must be unique")
        for row in self.rows:
            if len(row.answers) != N_ITEMS:
                raise SurveyFormatError(
                    f"respondent '{row.respondent_id}' has {len(row.answers)} answers"
                )
            if row.sex not in SEXES:
                raise SurveyFormatError(
                    f"respondent '{row.respondent_id}' has sex '{row.sex}'"
                )
            for item, value in zip(self.items, row.answers):
                if value is None:
                    continue
                if not isinstance(value, int) or isinstance(value, bool) or not 1 <= value <= 5:
                    raise SurveyFormatError(
                        f"respondent '{row.respondent_id}' item {item}: bad value {value!r}"
                    )

    def column_index(self, item: str) -> int:
        try:
            return self.items.index(item)
        except ValueError:
            raise SurveyFormatError(f"matrix has no item column '{item}'") from None

    def column(self, item: str) -> tuple[int | None, ...]:
        i = self.column_index(item)
        return tuple(row.answers[i] for row in self.rows)


def load_survey_csv(text: str, submap: SubscaleMap | None = None) -> SurveyMatrix:
    """Parse the survey interchange CSV: respondent,sex,i01..i18 per row."""
    submap = submap or default_map()
    expected = ["respondent", "sex", *submap.item_order]
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SurveyFormatError("survey file is empty") from None
    if [h.strip() for h in header] != expected:
        raise SurveyFormatError(
            f"bad header: expected {','.join(expected)}"
        )
    rows: list[Respondent] = []
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not cell.strip() for cell in record):
            continue
        if len(record) != len(expected):
            raise SurveyFormatError(f"line {lineno}: expected {len(expected)} fields")
        respondent_id = record[0].strip()
        if not respondent_id:
            raise SurveyFormatError(f"line {lineno}: empty respondent id")
        sex = record[1].strip().lower() or "missing"
        if sex not in SEXES:
            raise SurveyFormatError(f"line {lineno}: sex must be f, m or empty")
        answers: list[int | None] = []
        for item, cell in zip(submap.item_order, record[2:]):
            cell = cell.strip()
            if not cell:
                answers.append(None)
                continue
            try:
                value = int(cell)
            except ValueError:
                raise SurveyFormatError(
                    f"line {lineno}: item {item}: '{cell}' is not an integer"
                ) from None
            if not 1 <= value <= 5:
                raise SurveyFormatError(f"line {lineno}: item {item}: {value} not in 1..5")
            answers.append(value)
        rows.append(Respondent(respondent_id, sex, tuple(answers)))
    return SurveyMatrix(tuple(submap.item_order), tuple(rows))


# ---------------------------------------------------------------------------
# Recoding and scoring


def recode(m: SurveyMatrix, submap: SubscaleMap | None = None) -> SurveyMatrix:
    """Map reverse-coded items x -> min+max-x; everything else unchanged."""
    submap = submap or default_map()
    flip = {m.column_index(item) for item in submap.reverse if item in m.items}
    rows = tuple(
        Respondent(
            row.respondent_id,
            row.sex,
            tuple(
                value if value is None or i not in flip else submap.recode_value(value)
                for i, value in enumerate(row.answers)
            ),
        )
        for row in m.rows
    )
    return SurveyMatrix(m.items, rows)


@dataclass(frozen=True)
class Scores:
    respondent_id: str
    sex: str
    subscales: dict[str, float | None]
    overall: float | None


def score(m: SurveyMatrix, submap: SubscaleMap | None = None) -> list[Scores]:
    """Per-respondent subscale and overall scores.

    Expects an already recoded matrix.  A subscale with any missing item
    is missing; the overall is missing as soon as one subscale is.
    """
    submap = submap or default_map()
    indices = {c.key: tuple(m.column_index(item) for item in c.items) for c in submap.constructs}
    out: list[Scores] = []
    for row in m.rows:
        subscales: dict[str, float | None] = {}
        for key, (i, j) in indices.items():
            a, b = row.answers[i], row.answers[j]
            subscales[key] = None if a is None or b is None else (a + b) / 2
        values = list(subscales.values())
        overall = None if any(v is None for v in values) else math.fsum(values)
        out.append(Scores(row.respondent_id, row.sex, subscales, overall))
    return out


# ---------------------------------------------------------------------------
# Statistics


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _sample_variance(values: Sequence[float]) -> float:
    # Two-pass n-1 variance; fsum keeps the small-sample sums exact.
    n = len(values)
    if n < 2:
        raise DegenerateError("variance needs at least two observations")
    center = _mean(values)
    return math.fsum((v - center) ** 2 for v in values) / (n - 1)


def cronbach_alpha(m: SurveyMatrix, items: Sequence[str] | None = None) -> float:
    """Internal consistency over the given items (all 18 by default).

    Rows with any missing answer among the chosen items are dropped
    (listwise deletion).  Variances use the n-1 denominator.
    """
    chosen = tuple(items) if items is not None else m.items
    if len(chosen) < 2:
        raise DegenerateError("alpha needs at least two items")
    indices = [m.column_index(item) for item in chosen]
    complete = [
        [row.answers[i] for i in indices]
        for row in m.rows
        if all(row.answers[i] is not None for i in indices)
    ]
    if len(complete) < 2:
        raise DegenerateError("alpha needs at least two complete rows")
    k = len(chosen)
    item_variance = math.fsum(
        _sample_variance([row[j] for row in complete]) for j in range(k)
    )
    total_variance = _sample_variance([math.fsum(row) for row in complete])
    if total_variance == 0:
        raise DegenerateError("total score variance is zero")
    return k / (k - 1) * (1 - item_variance / total_variance)


@dataclass(frozen=True)
class TestResult:
    U: float
    z: float
    p: float
    n_f: int
    n_m: int


def _midranks(values: Sequence[float]) -> tuple[list[float], float]:
    """Ranks with ties averaged, plus the tie-correction sum of t^3-t."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    tie_sum = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for pos in order[i : j + 1]:
            ranks[pos] = rank
        t = j - i + 1
        tie_sum += t**3 - t
        i = j + 1
    return ranks, tie_sum


def mann_whitney(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Two-sided Mann-Whitney U with midranks and tie-corrected variance.

    U counts the pairs the first group wins (ties count half), so z is
    negative when the first group ranks lower.  The p value comes from
    the normal approximation; with zero variance (every pooled value
    identical) z is 0 and p is 1.
    """
    if not a or not b:
        raise EmptyGroup("both groups need at least one observation")
    n1, n2 = len(a), len(b)
    pooled = list(a) + list(b)
    ranks, tie_sum = _midranks(pooled)
    rank_sum_a = math.fsum(ranks[:n1])
    u = rank_sum_a - n1 * (n1 + 1) / 2
    total = n1 + n2
    variance = n1 * n2 / 12 * (total + 1 - tie_sum / (total * (total - 1)))
    if variance <= 0:
        return TestResult(U=u, z=0.0, p=1.0, n_f=n1, n_m=n2)
    z = (u - n1 * n2 / 2) / math.sqrt(variance)
    p = math.erfc(abs(z) / math.sqrt(2))
    return TestResult(U=u, z=z, p=p, n_f=n1, n_m=n2)


# ---------------------------------------------------------------------------
# Descriptives


@dataclass(frozen=True)
class Stats:
    n: int
    mean: float | None
    sd: float | None
    min: float | None
    max: float | None

    def to_dict(self) -> dict[str, float | int | None]:
        return {"n": self.n, "mean": self.mean, "sd": self.sd, "min": self.min, "max": self.max}


def _stats(values: Sequence[float]) -> Stats:
    if not values:
        return Stats(0, None, None, None, None)
    sd = math.sqrt(_sample_variance(values)) if len(values) >= 2 else None
    return Stats(len(values), _mean(values), sd, min(values), max(values))


def descriptives(m: SurveyMatrix, submap: SubscaleMap | None = None) -> dict[str, dict[str, Stats]]:
    """Mean, SD, min and max per item and per subscale, plus the overall.

    Expects an already recoded matrix.  Missing cells are dropped per
    column (pairwise deletion); the SD of fewer than two values is
    missing, as is everything over an empty column.
    """
    submap = submap or default_map()
    items = {
        item: _stats([v for v in m.column(item) if v is not None])
        for item in m.items
    }
    scored = score(m, submap)
    subscales = {
        key: _stats([s.subscales[key] for s in scored if s.subscales[key] is not None])
        for key in submap.construct_keys
    }
    overall = _stats([s.overall for s in scored if s.overall is not None])
    return {"items": items, "subscales": subscales, "overall": {"overall": overall}}


# ---------------------------------------------------------------------------
# Whole-file operations (the CLI surface)


def score_csv(text: str, submap: SubscaleMap | None = None) -> str:
    """CSV in, per-respondent scores CSV out (subscales in sheet order)."""
    submap = submap or default_map()
    scored = score(recode(load_survey_csv(text, submap), submap), submap)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["respondent", *submap.construct_keys, "overall"])
    for s in scored:
        row = [s.respondent_id]
        row += ["" if s.subscales[k] is None else _fmt(s.subscales[k]) for k in submap.construct_keys]
        row.append("" if s.overall is None else _fmt(s.overall))
        writer.writerow(row)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return f"{value:g}"


def report(text: str, submap: SubscaleMap | None = None) -> dict:
    """Descriptives, internal consistency and the sex comparison, as JSON-able data."""
    submap = submap or default_map()
    raw = load_survey_csv(text, submap)
    recoded = recode(raw, submap)
    scored = score(recoded, submap)
    stats = descriptives(recoded, submap)

    try:
        alpha = cronbach_alpha(recoded)
    except DegenerateError:
        alpha = None

    females = [s.overall for s in scored if s.sex == "f" and s.overall is not None]
    males = [s.overall for s in scored if s.sex == "m" and s.overall is not None]
    if females and males:
        result = mann_whitney(females, males)
        comparison = {
            "U": result.U,
            "z": result.z,
            "p": result.p,
            "n_f": result.n_f,
            "n_m": result.n_m,
        }
    else:
        comparison = None

    sex_counts = {key: sum(1 for row in raw.rows if row.sex == key) for key in SEXES}
    return {
        "n_respondents": len(raw.rows),
        "sex_counts": sex_counts,
        "cronbach_alpha": alpha,
        "mann_whitney_overall": comparison,
        "descriptives": {
            section: {name: stat.to_dict() for name, stat in block.items()}
            for section, block in stats.items()
        },
    }
