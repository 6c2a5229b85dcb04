"""Aggregation of binary crowd ratings into quantized quality scores.

Each (image, caption) pair is rated YES/NO/SKIP by a handful of raters. Pairs
with too many skips are dropped; the rest get the YES-rate rounded to the
nearest eighth. All score arithmetic is done on integer numerators over 8 so
the quantization is exact.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import DuplicateKey, MalformedRecord, NoOverlap

logger = logging.getLogger(__name__)

SCORE_DENOMINATOR = 8
PROTOCOL_MIN_VALID = 8
MAX_RATINGS = 20


class Rating(enum.Enum):
    YES = "YES"
    NO = "NO"
    SKIP = "SKIP"


@dataclass(frozen=True)
class QualityScore:
    """A score ``numerator / 8`` backed by ``n_valid`` non-SKIP ratings."""

    numerator: int
    n_valid: int

    def __post_init__(self):
        if not 0 <= self.numerator <= SCORE_DENOMINATOR:
            raise ValueError(f"numerator {self.numerator} outside 0..8")

    @property
    def value(self) -> float:
        return self.numerator / SCORE_DENOMINATOR

    @property
    def low_support(self) -> bool:
        return self.n_valid < PROTOCOL_MIN_VALID

    @classmethod
    def from_value(cls, value: float, n_valid: int) -> "QualityScore":
        scaled = value * SCORE_DENOMINATOR
        k = int(round(scaled))
        if scaled != k:
            raise ValueError(f"score {value!r} is not a multiple of 1/8")
        return cls(k, n_valid)


@dataclass(frozen=True)
class Filtered:
    n_skips: int
    reason: str


@dataclass(frozen=True)
class RatingRecord:
    image_id: str
    caption_id: str
    ratings: tuple
    caption_text: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.caption_id)


@dataclass(frozen=True)
class ScoredRecord:
    image_id: str
    caption_id: str
    score: QualityScore


@dataclass(frozen=True)
class FilterLogEntry:
    image_id: str
    caption_id: str
    n_skips: int
    reason: str


@dataclass
class AggregationResult:
    scores: list = field(default_factory=list)
    filter_log: list = field(default_factory=list)


@dataclass(frozen=True)
class StabilityReport:
    n_pairs: int
    mean_diff: float
    std_diff: float
    frac_within_quarter: float


def quantize_numerator(n_yes, n_valid):
    """Numerator ``k`` of ``round(n_yes / n_valid * 8) / 8``, half away from zero.

    Works elementwise on integer arrays. Both arguments are non-negative, so
    half-away-from-zero is ``floor(x + 1/2)``, evaluated as
    ``(16 * n_yes + n_valid) // (2 * n_valid)`` in integers.
    """
    n_yes = np.asarray(n_yes, dtype=np.int64)
    n_valid = np.asarray(n_valid, dtype=np.int64)
    k = (2 * SCORE_DENOMINATOR * n_yes + n_valid) // (2 * n_valid)
    return int(k) if k.ndim == 0 else k


def _as_rating(r) -> Rating:
    if isinstance(r, Rating):
        return r
    return Rating(str(r).upper())


def aggregate_sample(ratings, max_skips: int = 2) -> QualityScore | Filtered:
    """Collapse one pair's ratings into a :class:`QualityScore`.

    Returns :class:`Filtered` when more than ``max_skips`` ratings are SKIP,
    or when nothing but SKIPs remain.
    """
    ratings = [_as_rating(r) for r in ratings]
    if not ratings:
        raise ValueError("ratings must be non-empty")
    n_skips = sum(r is Rating.SKIP for r in ratings)
    if n_skips > max_skips:
        return Filtered(n_skips, f"more than {max_skips} SKIP ratings")
    n_valid = len(ratings) - n_skips
    if n_valid == 0:
        return Filtered(n_skips, "all ratings are SKIP")
    n_yes = sum(r is Rating.YES for r in ratings)
    score = QualityScore(quantize_numerator(n_yes, n_valid), n_valid)
    if score.low_support:
        logger.warning("score built from only %d valid ratings", n_valid)
    return score


def aggregate_dataset(records: Iterable[RatingRecord], max_skips: int = 2) -> AggregationResult:
    result = AggregationResult()
    seen = set()
    for lineno, rec in enumerate(records, 1):
        if rec.key in seen:
            raise DuplicateKey(rec.key, line=lineno)
        seen.add(rec.key)
        out = aggregate_sample(rec.ratings, max_skips)
        if isinstance(out, Filtered):
            result.filter_log.append(
                FilterLogEntry(rec.image_id, rec.caption_id, out.n_skips, out.reason))
        else:
            result.scores.append(ScoredRecord(rec.image_id, rec.caption_id, out))
    return result


def diff_statistics(diffs) -> StabilityReport:
    diffs = np.asarray(diffs, dtype=np.float64)
    n = diffs.size
    if n == 0:
        raise NoOverlap("no pairs to compare")
    # quarter-multiples are exact in binary, so the <= test is exact too
    within = np.count_nonzero(np.abs(diffs) <= 0.25)
    return StabilityReport(
        n_pairs=int(n),
        mean_diff=float(diffs.mean()),
        std_diff=float(diffs.std()),
        frac_within_quarter=within / n,
    )


def stability_report(scores_a: Mapping, scores_b: Mapping) -> StabilityReport:
    """Compare two independent scorings of the same items over their shared keys."""
    shared = [k for k in scores_a if k in scores_b]
    if not shared:
        raise NoOverlap("the two score maps share no keys")
    diffs = [(scores_a[k].numerator - scores_b[k].numerator) / SCORE_DENOMINATOR
             for k in shared]
    return diff_statistics(diffs)


def simulate_rater_process(p_true: float, n_raters: int, skip_prob: float = 0.0,
                           rng_seed: int = 0) -> list[Rating]:
    if not 0.0 <= p_true <= 1.0:
        raise ValueError("p_true must lie in [0, 1]")
    if not 0.0 <= skip_prob < 1.0:
        raise ValueError("skip_prob must lie in [0, 1)")
    rng = np.random.default_rng(rng_seed)
    skip = rng.random(n_raters) < skip_prob
    yes = rng.random(n_raters) < p_true
    return [Rating.SKIP if s else (Rating.YES if y else Rating.NO) for s, y in zip(skip, yes)]


def simulate_scores(p_true, n_raters: int, rng: np.random.Generator,
                    skip_prob: float = 0.0, max_skips: int = 2):
    """Vectorized counterpart of ``simulate_rater_process`` + ``aggregate_sample``.

    Returns ``(numerators, kept)`` arrays shaped like ``p_true``; entries with
    ``kept == False`` were filtered for skips and their numerator is -1.
    """
    p_true = np.asarray(p_true, dtype=np.float64)
    n_skips = rng.binomial(n_raters, skip_prob, size=p_true.shape) if skip_prob else \
        np.zeros(p_true.shape, dtype=np.int64)
    n_valid = n_raters - n_skips
    kept = (n_skips <= max_skips) & (n_valid > 0)
    n_yes = rng.binomial(n_valid, p_true)
    k = np.full(p_true.shape, -1, dtype=np.int64)
    k[kept] = quantize_numerator(n_yes[kept], n_valid[kept])
    return k, kept


# -- file formats -----------------------------------------------------------

def parse_rating_line(line: str, lineno: int, path=None) -> RatingRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid JSON: {exc.msg}", lineno, path) from None
    if not isinstance(obj, dict):
        raise MalformedRecord("expected a JSON object", lineno, path)
    for key in ("image_id", "caption_id", "ratings"):
        if key not in obj:
            raise MalformedRecord(f"missing field {key!r}", lineno, path)
    ratings = obj["ratings"]
    if not isinstance(ratings, list) or not 1 <= len(ratings) <= MAX_RATINGS:
        raise MalformedRecord(f"'ratings' must be a list of 1..{MAX_RATINGS} values",
                              lineno, path)
    try:
        parsed = tuple(Rating(r) for r in ratings)
    except ValueError as exc:
        raise MalformedRecord(str(exc), lineno, path) from None
    caption = obj.get("caption")
    return RatingRecord(str(obj["image_id"]), str(obj["caption_id"]), parsed,
                        None if caption is None else str(caption))


def read_ratings(path) -> Iterator[RatingRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield parse_rating_line(line, lineno, path)


def write_scores(path, scores: Iterable[ScoredRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in scores:
            fh.write(json.dumps({"image_id": rec.image_id, "caption_id": rec.caption_id,
                                 "score": rec.score.value, "n_valid": rec.score.n_valid}))
            fh.write("\n")


def write_filter_log(path, entries: Iterable[FilterLogEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"image_id": e.image_id, "caption_id": e.caption_id,
                                 "n_skips": e.n_skips, "reason": e.reason}))
            fh.write("\n")


def read_scores(path) -> dict:
    """Load a scores file into ``{(image_id, caption_id): QualityScore}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = (str(obj["image_id"]), str(obj["caption_id"]))
                score = float(obj["score"])
                if not math.isfinite(score):
                    raise ValueError("non-finite score")
                qs = QualityScore.from_value(score, int(obj["n_valid"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(f"bad score record: {exc}", lineno, path) from None
            if key in out:
                raise DuplicateKey(key, line=lineno)
            out[key] = qs
    return out
