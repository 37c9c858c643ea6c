"""Longitudinal cohort: synthetic generation, eligibility, MMSE-trajectory
labeling, clinical feature selection/encoding, and stratified splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

logger = logging.getLogger(__name__)

SCORE_NAMES = (
    "LDELTOTAL", "RAVLT_learning", "RAVLT_immediate", "CDRSB",
    "FAQ", "TRABSCOR", "RAVLT_forgetting", "DIGITSCOR",
)
STATIC_NAMES = ("AGE", "GENDER", "APOE4")
PAPER_ATTRIBUTES = (
    "AGE", "GENDER", "LDELTOTAL", "RAVLT_learning", "RAVLT_immediate", "APOE4",
    "CDRSB", "FAQ", "TRABSCOR", "RAVLT_forgetting", "DIGITSCOR",
)
STABLE, DECLINE = "Stable", "Decline"
LABEL_CODE = {STABLE: 0, DECLINE: 1}
GRID_MONTHS = (0, 6, 12, 24)
VISIT_MONTHS = (0, 6, 12, 24)
VOLUME_MONTHS = (0, 6, 12)

# generator constants: (mean, sd, direction with impairment)
_SCORE_MODEL = {
    "LDELTOTAL": (9.0, 4.5, -1),
    "RAVLT_learning": (4.5, 2.6, -1),
    "RAVLT_immediate": (38.0, 11.0, -1),
    "CDRSB": (1.2, 1.1, +1),
    "FAQ": (2.5, 3.5, +1),
    "TRABSCOR": (95.0, 45.0, +1),
    "RAVLT_forgetting": (4.2, 2.4, +1),
    "DIGITSCOR": (40.0, 11.0, -1),
}
_SCORE_NOISE = 0.4
# stable per-subject offset of each score, in sd units; cancels in fu - bl
_SCORE_TRAIT = 1.5
_DECLINE_SEVERITY = 0.5
_ATROPHY_BASE, _ATROPHY_LEVEL, _ATROPHY_RATE = 0.25, 0.05, 0.04


class CohortError(ValueError):
    """Invalid or degenerate cohort data."""


@dataclass
class Visit:
    months_from_baseline: int
    mmse: int | None
    scores: list[float | None]
    volume_ref: str | None = None
    atrophy: float | None = None  # generator ground truth, not serialized

    def __post_init__(self):
        if self.mmse is not None and not 0 <= self.mmse <= 30:
            raise CohortError(f"MMSE {self.mmse} outside [0, 30]")
        if len(self.scores) != len(SCORE_NAMES):
            raise CohortError(f"expected {len(SCORE_NAMES)} scores, got {len(self.scores)}")


@dataclass
class Subject:
    id: str
    age: float | None
    gender: int | None
    apoe4: int | None
    visits: list[Visit]
    label: str | None = None
    true_class: str | None = None  # generator ground truth, not serialized

    def __post_init__(self):
        if not self.visits:
            raise CohortError(f"subject {self.id} has no visits")
        if self.apoe4 is not None and self.apoe4 not in (0, 1, 2):
            raise CohortError(f"subject {self.id}: APOE4 {self.apoe4} not in {{0, 1, 2}}")
        months = [v.months_from_baseline for v in self.visits]
        if any(b <= a for a, b in zip(months, months[1:])) or months[0] < 0:
            raise CohortError(f"subject {self.id}: visit months not strictly increasing")

    def visit_at(self, months: int) -> Visit | None:
        for v in self.visits:
            if v.months_from_baseline == months:
                return v
        return None


@dataclass
class CohortSplit:
    folds: list[list[str]]
    test: list[str]

    def train_ids(self, fold: int) -> list[str]:
        return [i for k, f in enumerate(self.folds) if k != fold for i in f]

    def to_json(self) -> str:
        return json.dumps({"test": self.test, "folds": self.folds}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CohortSplit":
        d = json.loads(text)
        return cls(folds=d["folds"], test=d["test"])


# ---------------------------------------------------------------------------
# generation


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_cohort(n_stable: int, n_decline: int, separation: float = 1.0, seed: int = 0,
                    score_noise: float | None = None) -> list[Subject]:
    """Synthetic ADNI-like cohort with bl/m06/m12/m24 visits and volume refs.

    Each subject draws from its own RNG stream keyed by index, so a subject's
    data does not depend on how many others are generated.
    """
    if n_stable < 1 or n_decline < 1:
        raise CohortError("both class counts must be >= 1")
    if not 0.0 < separation <= 1.0:
        raise CohortError(f"separation must be in (0, 1], got {separation}")
    if score_noise is None:
        score_noise = _SCORE_NOISE
    classes = [STABLE] * n_stable + [DECLINE] * n_decline
    order = np.random.default_rng(seed).permutation(len(classes))
    subjects = []
    for idx, pos in enumerate(order):
        subjects.append(_generate_subject(f"S{idx:04d}", classes[pos], separation, score_noise,
                                          _subject_rng(seed, idx)))
    return subjects


def _generate_subject(sid: str, cls: str, separation: float, score_noise: float,
                      rng: np.random.Generator) -> Subject:
    age = round(float(np.clip(rng.normal(73.0, 6.5), 55.0, 90.0)), 1)
    gender = int(rng.integers(0, 2))
    apoe4 = int(rng.choice(3, p=(0.55, 0.35, 0.10)))
    base_mmse = rng.uniform(27.0, 30.0)
    if cls == DECLINE:
        base_mmse -= 2.5 * separation
        slope = -rng.uniform(0.15, 0.35) * separation
        base_sev = rng.normal(_DECLINE_SEVERITY * separation, 0.6)
    else:
        slope = 0.0
        base_sev = rng.normal(0.0, 0.6)
    loadings = rng.uniform(0.7, 1.0, size=len(SCORE_NAMES))
    trait = rng.normal(0.0, _SCORE_TRAIT, size=len(SCORE_NAMES))
    visits = []
    for m in VISIT_MONTHS:
        lost = -slope * m
        mmse = int(np.clip(round(base_mmse - lost + rng.normal(0.0, 0.7)), 0, 30))
        severity = base_sev + lost / 3.0
        scores = []
        for j, name in enumerate(SCORE_NAMES):
            mu, sd, sign = _SCORE_MODEL[name]
            z = loadings[j] * severity + trait[j] + rng.normal(0.0, score_noise)
            scores.append(round(mu + sign * sd * z, 3))
        atrophy = float(np.clip(_ATROPHY_BASE + _ATROPHY_LEVEL * base_sev + _ATROPHY_RATE * lost,
                                0.0, 1.0))
        ref = f"{sid}_m{m:02d}" if m in VOLUME_MONTHS else None
        visits.append(Visit(m, mmse, scores, ref, atrophy if ref else None))
    return Subject(sid, age, gender, apoe4, visits, label=None, true_class=cls)


def volume_scale(subject_id: str, seed: int) -> tuple[float, float, float]:
    """Per-subject head-shape jitter, shared by all of the subject's visits."""
    h = int.from_bytes(subject_id.encode(), "little") % (1 << 31)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(h, 7)))
    return tuple(float(s) for s in rng.uniform(0.93, 1.07, size=3))


# ---------------------------------------------------------------------------
# eligibility and pairing


def follow_up_visit(subject: Subject) -> Visit | None:
    """The m12 visit with a volume, else m06 with a volume."""
    for m in (12, 6):
        v = subject.visit_at(m)
        if v is not None and v.volume_ref:
            return v
    return None


def is_eligible(subject: Subject) -> bool:
    mm = [v.months_from_baseline for v in subject.visits if v.mmse is not None]
    if len(mm) < 3 or max(mm) - min(mm) <= 12:
        return False
    bl = subject.visit_at(0)
    return bl is not None and bool(bl.volume_ref) and follow_up_visit(subject) is not None


def eligibility_filter(subjects: Iterable[Subject]) -> list[Subject]:
    return [s for s in subjects if is_eligible(s)]


# ---------------------------------------------------------------------------
# labeling


def trajectory(subject: Subject, grid: Sequence[int] = GRID_MONTHS) -> np.ndarray:
    """MMSE linearly resampled onto ``grid`` (held constant beyond observed visits)."""
    pts = [(v.months_from_baseline, v.mmse) for v in subject.visits if v.mmse is not None]
    if not pts:
        raise CohortError(f"subject {subject.id} has no MMSE values")
    t, y = zip(*pts)
    return np.interp(grid, t, y)


@dataclass
class Clustering:
    assignments: np.ndarray  # 0 = Stable, 1 = Decline, aligned with input order
    centroids: np.ndarray  # (2, len(grid)), rows Stable/Decline
    mean_change: tuple[float, float]


def cluster_trajectories(traj: np.ndarray, method: str = "ward") -> Clustering:
    """Agglomerative clustering cut at two clusters; the cluster whose mean
    end-minus-start change is lower is the Decline cluster."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape[0] < 2:
        raise CohortError("labeling needs at least 2 subjects")
    z = linkage(traj, method=method, metric="euclidean")
    ids = fcluster(z, t=2, criterion="maxclust")
    groups = sorted(set(ids.tolist()))
    if len(groups) < 2:
        raise CohortError("clustering produced a single cluster (degenerate cohort)")
    change = {g: float(np.mean(traj[ids == g, -1] - traj[ids == g, 0])) for g in groups}
    a, b = groups
    if math.isclose(change[a], change[b], rel_tol=0.0, abs_tol=1e-12):
        raise CohortError("tie in mean MMSE change between clusters (degenerate cohort)")
    decline = a if change[a] < change[b] else b
    stable = b if decline == a else a
    assignments = (ids == decline).astype(int)
    centroids = np.stack([traj[ids == stable].mean(axis=0), traj[ids == decline].mean(axis=0)])
    return Clustering(assignments, centroids, (change[stable], change[decline]))


def label_by_proximity(subjects: Sequence[Subject], centroids: np.ndarray) -> list[Subject]:
    out = []
    for s in subjects:
        d = np.linalg.norm(centroids - trajectory(s), axis=1)
        out.append(replace(s, label=DECLINE if d[1] < d[0] else STABLE))
    return out


def label_subjects(subjects: Sequence[Subject], holdout: Iterable[str] = (),
                   method: str = "ward") -> list[Subject]:
    """Label by MMSE-trajectory clustering.

    Subjects listed in ``holdout`` do not take part in the clustering and are
    labeled by the nearest cluster centroid instead. Input order is preserved.
    """
    holdout = set(holdout)
    members = [s for s in subjects if s.id not in holdout]
    result = cluster_trajectories(np.stack([trajectory(s) for s in members]), method)
    labeled = {s.id: replace(s, label=DECLINE if a else STABLE)
               for s, a in zip(members, result.assignments)}
    held = label_by_proximity([s for s in subjects if s.id in holdout], result.centroids)
    labeled.update({s.id: s for s in held})
    return [labeled[s.id] for s in subjects]


# ---------------------------------------------------------------------------
# feature selection


@dataclass
class FeatureSelection:
    selected: list[str]
    dropped_correlated: list[tuple[str, str, float]] = field(default_factory=list)
    dropped_missing: list[str] = field(default_factory=list)
    zero_variance: list[str] = field(default_factory=list)


def pearson_pairwise(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r over rows where both are present; 0 when either is constant."""
    ok = ~(np.isnan(a) | np.isnan(b))
    if ok.sum() < 2:
        return 0.0
    x, y = a[ok] - a[ok].mean(), b[ok] - b[ok].mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return 0.0 if den == 0 else float(x @ y) / den


def select_features(table: dict[str, np.ndarray], corr_threshold: float = 0.9,
                    na_threshold: float = 0.3) -> FeatureSelection:
    """Greedy correlation pruning then missing-fraction pruning.

    For each pair with ``|r| > corr_threshold`` the variable with more NAs is
    dropped (ties drop the later column). NA cells are ``nan``.
    """
    names = list(table)
    if len(names) < 2:
        raise CohortError("feature selection needs at least 2 variables")
    cols = {n: np.asarray(table[n], dtype=float) for n in names}
    na = {n: int(np.isnan(cols[n]).sum()) for n in names}
    zero_var = [n for n in names if np.nanstd(cols[n]) == 0 or np.all(np.isnan(cols[n]))]
    if zero_var:
        logger.warning("zero-variance variables treated as uncorrelated: %s", zero_var)
    alive = set(names)
    report = FeatureSelection(selected=[], zero_variance=zero_var)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if a not in alive or b not in alive:
                continue
            r = 0.0 if a in zero_var or b in zero_var else pearson_pairwise(cols[a], cols[b])
            if abs(r) > corr_threshold:
                drop = a if na[a] > na[b] else b
                alive.discard(drop)
                report.dropped_correlated.append((drop, b if drop == a else a, r))
    for n in names:
        if n in alive and na[n] / len(cols[n]) > na_threshold:
            alive.discard(n)
            report.dropped_missing.append(n)
    report.selected = [n for n in names if n in alive]
    return report


def candidate_table(subjects: Sequence[Subject], seed: int = 0) -> dict[str, np.ndarray]:
    """Baseline-visit table of the 11 model attributes plus redundant or
    sparsely measured extras, mimicking the raw variable pool."""
    rng = np.random.default_rng(seed)
    bl = [s.visit_at(0) or s.visits[0] for s in subjects]
    n = len(subjects)

    def col(values):
        return np.array([np.nan if v is None else float(v) for v in values])

    table = {
        "AGE": col(s.age for s in subjects),
        "GENDER": col(s.gender for s in subjects),
    }
    scores = {name: col(v.scores[j] for v in bl) for j, name in enumerate(SCORE_NAMES)}
    for name in PAPER_ATTRIBUTES:
        if name == "APOE4":
            table[name] = col(s.apoe4 for s in subjects)
        elif name in scores:
            table[name] = scores[name]

    def sparse(x, frac):
        x = x.copy()
        x[rng.random(n) < frac] = np.nan
        return x

    sev = (scores["CDRSB"] - np.nanmean(scores["CDRSB"])) / np.nanstd(scores["CDRSB"])
    adas13 = 14.0 + 5.0 * (0.8 * sev + rng.normal(0.0, 0.8, n))
    table["ADAS13"] = sparse(adas13, 0.35)
    table["ADAS11"] = sparse(0.72 * adas13 + rng.normal(0.0, 0.2, n), 0.5)
    table["RAVLT_perc_forgetting"] = sparse(
        scores["RAVLT_forgetting"] * 11.0 + rng.normal(0.0, 0.5, n), 0.15)
    table["MOCA"] = sparse(25.0 - 2.0 * sev + rng.normal(0.0, 2.0, n), 0.55)
    table["Ventricles"] = sparse(3.5e4 + 8e3 * sev + rng.normal(0.0, 1e4, n), 0.45)
    return table


# ---------------------------------------------------------------------------
# encoding


@dataclass
class ClinicalVector:
    scores: np.ndarray  # (8,) encoded, NA -> 0
    static: np.ndarray  # (3,) encoded AGE z, GENDER, APOE4 / 2
    mask: np.ndarray  # (8,) True where the score is NA

    def copy(self) -> "ClinicalVector":
        return ClinicalVector(self.scores.copy(), self.static.copy(), self.mask.copy())


@dataclass
class Normalizer:
    score_mean: np.ndarray
    score_std: np.ndarray
    age_mean: float
    age_std: float

    @classmethod
    def fit(cls, subjects: Sequence[Subject]) -> "Normalizer":
        """Statistics over each subject's baseline and follow-up visits."""
        rows = []
        for s in subjects:
            for v in (s.visit_at(0), follow_up_visit(s)):
                if v is not None:
                    rows.append([np.nan if x is None else x for x in v.scores])
        if not rows:
            raise CohortError("cannot fit normalization on zero subjects")
        arr = np.array(rows, dtype=float)
        mean = np.nanmean(arr, axis=0)
        std = np.nanstd(arr, axis=0)
        if np.any(std == 0) or np.any(np.isnan(std)):
            logger.warning("zero std in training fold; using 1 for those scores")
            std = np.where((std == 0) | np.isnan(std), 1.0, std)
        ages = np.array([s.age for s in subjects if s.age is not None], dtype=float)
        age_mean = float(ages.mean()) if ages.size else 0.0
        age_std = float(ages.std()) if ages.size else 1.0
        if age_std == 0:
            logger.warning("zero AGE std in training fold; using 1")
            age_std = 1.0
        return cls(np.nan_to_num(mean), std, age_mean, age_std)


def encode_clinical(subject: Subject, visit: Visit, norm: Normalizer) -> ClinicalVector:
    raw = np.array([np.nan if x is None else x for x in visit.scores], dtype=float)
    mask = np.isnan(raw)
    scores = np.where(mask, 0.0, (raw - norm.score_mean) / norm.score_std)
    age = 0.0 if subject.age is None else (subject.age - norm.age_mean) / norm.age_std
    gender = 0.0 if subject.gender is None else float(subject.gender)
    apoe = 0.0 if subject.apoe4 is None else 0.5 * subject.apoe4
    return ClinicalVector(scores, np.array([age, gender, apoe]), mask)


def decode_scores(vec: ClinicalVector, norm: Normalizer) -> np.ndarray:
    """Inverse of the score encoding; NA entries come back as nan."""
    raw = vec.scores * norm.score_std + norm.score_mean
    return np.where(vec.mask, np.nan, raw)


@dataclass
class SubjectPair:
    subject_id: str
    label: int | None
    bl: ClinicalVector
    fu: ClinicalVector
    vol_bl: str | None
    vol_fu: str | None


def make_pair(subject: Subject, norm: Normalizer) -> SubjectPair:
    bl, fu = subject.visit_at(0), follow_up_visit(subject)
    if bl is None or fu is None:
        raise CohortError(f"subject {subject.id} lacks a baseline/follow-up pair")
    label = LABEL_CODE[subject.label] if subject.label is not None else None
    return SubjectPair(subject.id, label, encode_clinical(subject, bl, norm),
                       encode_clinical(subject, fu, norm), bl.volume_ref, fu.volume_ref)


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    s = sum(weights)
    quotas = [total * w / s for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(subjects: Sequence[Subject], n_test: int, n_folds: int = 4,
                     seed: int = 0) -> CohortSplit:
    """Class-proportional held-out test set plus ``n_folds`` stratified folds.

    Folds are dealt round-robin across the concatenated class lists, which
    keeps fold sizes within one of each other as well as class counts.
    """
    if n_folds < 2:
        raise CohortError("need at least 2 folds")
    if not 0 <= n_test < len(subjects):
        raise CohortError(f"n_test={n_test} must be below the cohort size {len(subjects)}")
    by_class: dict[str, list[str]] = {}
    for s in subjects:
        if s.label is None:
            raise CohortError(f"subject {s.id} is unlabeled")
        by_class.setdefault(s.label, []).append(s.id)
    classes = [c for c in (STABLE, DECLINE) if c in by_class]
    if len(classes) < 2:
        raise CohortError("both classes must be present to stratify")
    rng = np.random.default_rng(seed)
    pools = {c: [by_class[c][i] for i in rng.permutation(len(by_class[c]))] for c in classes}
    n_test_cls = _largest_remainder(n_test, [len(pools[c]) for c in classes])
    test, rest = [], []
    for c, k in zip(classes, n_test_cls):
        if len(pools[c]) - k < n_folds:
            raise CohortError(f"class {c} too small to stratify into {n_folds} folds")
        test.extend(pools[c][:k])
        rest.extend(pools[c][k:])
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for i, sid in enumerate(rest):
        folds[i % n_folds].append(sid)
    return CohortSplit(folds=folds, test=test)


# ---------------------------------------------------------------------------
# files


CSV_HEADER = ["subject_id", "label", "months_from_bl", "MMSE", "AGE", "GENDER", "APOE4",
              *SCORE_NAMES, "volume_ref"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def write_cohort(subjects: Sequence[Subject], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in subjects:
            for v in s.visits:
                w.writerow([s.id, _fmt(s.label), v.months_from_baseline, _fmt(v.mmse),
                            _fmt(s.age), _fmt(s.gender), _fmt(s.apoe4),
                            *(_fmt(x) for x in v.scores), _fmt(v.volume_ref)])


def read_cohort(path: str | Path) -> list[Subject]:
    def num(x, kind=float):
        return None if x == "" else kind(x)

    rows: dict[str, list[dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise CohortError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.setdefault(row["subject_id"], []).append(row)
    subjects = []
    try:
        for sid, rs in rows.items():
            first = rs[0]
            visits = [Visit(int(r["months_from_bl"]), num(r["MMSE"], int),
                            [num(r[n]) for n in SCORE_NAMES], r["volume_ref"] or None)
                      for r in rs]
            subjects.append(Subject(sid, num(first["AGE"]), num(first["GENDER"], int),
                                    num(first["APOE4"], int), visits, first["label"] or None))
    except (ValueError, KeyError) as exc:
        raise CohortError(f"{path}: {exc}") from exc
    return subjects
