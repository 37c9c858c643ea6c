"""Cross-validated training, test-set NA sweeps and result bookkeeping."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .cohort import (
    DECLINE, CohortError, CohortSplit, Normalizer, Subject, SubjectPair, make_pair, volume_scale,
)
from .metrics import EvalReport, MetricsError, evaluate, roc_auc
from .model import Batch, Model, ModelSpec, build, load_checkpoint, save_checkpoint
from .robustness import PAPER_FRACTIONS, NAPolicy, inject_test_na, n_erased, train_na_mask
from .volume import AugmentSpec, augment, read_volume, render_synthetic_brain

logger = logging.getLogger(__name__)

MODELS = ("clin", "multi", "multim", "mlp")


@dataclass
class Preset:
    name: str
    n_stable: int
    n_decline: int
    n_test: int
    dims: tuple[int, int, int]
    spec: Callable[[], ModelSpec]
    lr: float


PRESETS = {
    "tiny": Preset("tiny", 32, 32, 16, (26, 27, 19), ModelSpec.tiny, 1e-3),
    "paper": Preset("paper", 191, 186, 57, (102, 108, 75), ModelSpec.paper, 1e-4),
}


@dataclass
class RunConfig:
    model: str = "multi"
    epochs: int = 75
    folds: int = 4
    seed: int = 0
    lr: float | None = None  # None -> preset default
    batch_size: int = 4
    preset: str = "tiny"
    augment: bool = True
    na_repeats: int = 20
    na_policy: NAPolicy = field(default_factory=lambda: NAPolicy("train_random"))
    spec: ModelSpec | None = None
    # test with one model retrained on all CV subjects instead of the fold ensemble
    refit: bool = False

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.na_repeats < 1:
            raise ValueError("na_repeats must be >= 1")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else PRESETS[self.preset].lr

    def model_spec(self) -> ModelSpec:
        return self.spec if self.spec is not None else PRESETS[self.preset].spec()

    @property
    def uses_train_na(self) -> bool:
        return self.model == "multim"


# ---------------------------------------------------------------------------
# volumes


class VolumeStore:
    """Loads volumes by reference and counts reads (the I/O audit hook)."""

    def __init__(self, directory: str | Path | None = None,
                 loader: Callable[[str], np.ndarray] | None = None, cache: int | None = None):
        if (directory is None) == (loader is None):
            raise ValueError("give exactly one of directory or loader")
        self.directory = Path(directory) if directory is not None else None
        self.loader = loader
        self.cache_limit = cache
        self._cache: dict[str, np.ndarray] = {}
        self.reads = 0

    def get(self, ref: str) -> np.ndarray:
        if ref in self._cache:
            return self._cache[ref]
        self.reads += 1
        if self.loader is not None:
            v = self.loader(ref)
        else:
            v = read_volume(self.directory / f"{ref}.rvol")
        if self.cache_limit is None or len(self._cache) < self.cache_limit:
            self._cache[ref] = v
        return v


def synthetic_volume(subject: Subject, visit_months: int, dims, seed: int) -> np.ndarray:
    visit = subject.visit_at(visit_months)
    if visit is None or visit.atrophy is None:
        raise CohortError(f"no generator atrophy for {subject.id} m{visit_months:02d}")
    idx = int(subject.id.lstrip("S") or 0)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(idx, visit_months, 1)))
    return render_synthetic_brain(visit.atrophy, dims, rng, volume_scale(subject.id, seed))


def synthetic_store(subjects: Sequence[Subject], dims, seed: int) -> VolumeStore:
    """In-memory store rendering volumes from generator ground truth."""
    by_ref = {}
    for s in subjects:
        for v in s.visits:
            if v.volume_ref:
                by_ref[v.volume_ref] = (s, v.months_from_baseline)

    def load(ref: str) -> np.ndarray:
        s, m = by_ref[ref]
        return synthetic_volume(s, m, dims, seed)

    return VolumeStore(loader=load)


def collate(pairs: Sequence[SubjectPair], store: VolumeStore | None, need_volumes: bool,
            aug: AugmentSpec | None = None, rng: np.random.Generator | None = None) -> Batch:
    clin_bl = np.stack([p.bl.scores for p in pairs])
    clin_fu = np.stack([p.fu.scores for p in pairs])
    static = np.stack([p.bl.static for p in pairs])
    labels = np.array([p.label if p.label is not None else -1 for p in pairs])
    vol_bl = vol_fu = None
    if need_volumes:
        if store is None:
            raise ValueError("volumes required but no volume store given")

        def load(ref):
            v = store.get(ref)
            return augment(v, aug, rng) if aug is not None else v

        vol_bl = np.stack([load(p.vol_bl) for p in pairs])[:, None]
        vol_fu = np.stack([load(p.vol_fu) for p in pairs])[:, None]
    return Batch(clin_bl, clin_fu, static, vol_bl, vol_fu, labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class FoldResult:
    fold: int
    model: Model
    norm: Normalizer
    best_epoch: int
    best_val_auc: float
    history: list[float] = field(default_factory=list)


@dataclass
class Experiment:
    config: RunConfig
    split: CohortSplit
    folds: list[FoldResult]
    subjects: dict[str, Subject]
    cohort_digest: str
    reports: dict[float, EvalReport] = field(default_factory=dict)
    fold_aucs: dict[float, list[float]] = field(default_factory=dict)
    store: VolumeStore | None = None
    refit: FoldResult | None = None

    @property
    def name(self) -> str:
        return self.config.model


def cohort_digest(subjects: Sequence[Subject], split: CohortSplit) -> str:
    h = hashlib.sha256()
    for s in sorted(subjects, key=lambda s: s.id):
        h.update(f"{s.id}:{s.label};".encode())
    h.update(split.to_json().encode())
    return h.hexdigest()[:16]


def _fold_rng(seed: int, fold: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(fold, stream)))


def _val_score(model: Model, batch: Batch) -> float:
    probs = model.predict(batch)
    try:
        return roc_auc(probs, batch.labels)[1]
    except MetricsError:
        # one-class validation fold: fall back to negative BCE
        p = np.clip(probs, ad.BCE_EPS, 1 - ad.BCE_EPS)
        y = batch.labels
        return float(np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def train_fold(config: RunConfig, fold: int, train: Sequence[Subject], val: Sequence[Subject],
               store: VolumeStore | None, test_ids: set[str] = frozenset(),
               on_epoch: Callable[[int, Model], bool] | None = None) -> FoldResult:
    """Train one CV fold, keeping the parameters with the best validation AUC.

    ``on_epoch(epoch, model)`` runs after every epoch; returning True stops
    training early.
    """
    leaked = {s.id for s in train} & set(test_ids)
    if leaked:
        raise CohortError(f"test subjects in training fold: {sorted(leaked)}")
    norm = Normalizer.fit(train)
    train_pairs = [make_pair(s, norm) for s in train]
    val_pairs = [make_pair(s, norm) for s in val]
    if any(p.label is None for p in train_pairs + val_pairs):
        raise CohortError("unlabeled subject in training data")

    model = build(config.model, config.model_spec(), _fold_rng(config.seed, fold, 0))
    opt = ad.Adam(model.parameters(), lr=config.learning_rate)
    rng = _fold_rng(config.seed, fold, 1)
    aug = AugmentSpec() if config.augment else None
    need_vol = model.needs_volumes
    val_batch = collate(val_pairs, store, need_vol) if val_pairs else None

    best = (-np.inf, 0, model.state())
    history = []
    for epoch in range(config.epochs):
        pairs = train_pairs
        if config.uses_train_na:
            pairs = train_na_mask(pairs, config.na_policy, rng)
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.batch_size):
            chunk = [pairs[i] for i in order[start : start + config.batch_size]]
            assert not ({p.subject_id for p in chunk} & test_ids)
            batch = collate(chunk, store, need_vol, aug, rng)
            pred = model.forward(batch, "train", rng)
            loss = ad.bce_loss(pred, batch.labels[:, None])
            ad.backward(loss)
            opt.step()
        if val_batch is not None:
            score = _val_score(model, val_batch)
            history.append(score)
            if score > best[0]:
                best = (score, epoch, model.state())
        if on_epoch is not None and on_epoch(epoch, model):
            break
    if val_batch is None:
        best = (float("nan"), epoch, model.state())
    model.load_state(best[2])
    logger.info("fold %d: best epoch %d, val score %.4f", fold, best[1], best[0])
    return FoldResult(fold, model, norm, best[1], float(best[0]), history)


def run_train(config: RunConfig, subjects: Sequence[Subject], split: CohortSplit,
              store: VolumeStore | None = None) -> Experiment:
    """Train one model per CV fold and evaluate the fold ensemble on the test set."""
    by_id = {s.id: s for s in subjects}
    if any(s.label is None for s in subjects):
        raise CohortError("cohort must be labeled before training")
    if len(split.folds) != config.folds:
        raise CohortError(f"split has {len(split.folds)} folds, config wants {config.folds}")
    test_ids = set(split.test)
    folds = []
    for k in range(config.folds):
        train = [by_id[i] for i in split.train_ids(k)]
        val = [by_id[i] for i in split.folds[k]]
        folds.append(train_fold(config, k, train, val, store, test_ids))
    exp = Experiment(config, split, folds, by_id, cohort_digest(subjects, split), store=store)
    if config.refit:
        epochs = int(round(np.mean([f.best_epoch for f in folds]))) + 1
        everyone = [by_id[i] for fold in split.folds for i in fold]
        exp.refit = train_fold(replace(config, epochs=epochs), config.folds, everyone, [], store,
                               test_ids)
    evaluate_test(exp, 0.0)
    return exp


def encoded_test_pairs(exp: Experiment, fold: FoldResult, fraction: float, na_seed: int,
                       draw: int = 0) -> list[SubjectPair]:
    """Test pairs encoded with the fold's normalizer, with NA injected.

    The injection RNG is keyed by (na_seed, draw, subject position) but not by
    fraction or fold: every fold sees the same erased entries and larger
    fractions extend the masks of smaller ones.
    """
    out = []
    for i, sid in enumerate(exp.split.test):
        pair = make_pair(exp.subjects[sid], fold.norm)
        rng = np.random.default_rng(np.random.SeedSequence(na_seed, spawn_key=(draw, i)))
        out.append(inject_test_na(pair, fraction, rng))
    return out


def predict_test(exp: Experiment, fraction: float, na_seed: int | None = None) -> np.ndarray:
    """Probabilities of shape (models, draws, n_test).

    Models are the CV folds, followed by the refit model if there is one.
    Without injection every draw is identical, so a single draw is computed
    and repeated.
    """
    na_seed = exp.config.seed + 1000 if na_seed is None else na_seed
    draws = exp.config.na_repeats if n_erased(fraction) > 0 else 1
    models = exp.folds + ([exp.refit] if exp.refit is not None else [])
    preds = np.empty((len(models), draws, len(exp.split.test)))
    for f, fold in enumerate(models):
        for r in range(draws):
            pairs = encoded_test_pairs(exp, fold, fraction, na_seed, r)
            batch = collate(pairs, exp.store, fold.model.needs_volumes)
            preds[f, r] = fold.model.predict(batch)
    if draws < exp.config.na_repeats:
        preds = np.repeat(preds, exp.config.na_repeats, axis=1)
    return preds


def held_out_labels(exp: Experiment) -> np.ndarray:
    return np.array([exp.subjects[i].label == DECLINE for i in exp.split.test], dtype=int)


def evaluate_test(exp: Experiment, fraction: float, na_seed: int | None = None) -> EvalReport:
    """Score the fold ensemble (mean probability) on the test set.

    Predictions from all injection draws are pooled into one scored set, so
    the report estimates performance under the missingness process rather
    than for a single random pattern.
    """
    preds = predict_test(exp, fraction, na_seed)
    labels = np.tile(held_out_labels(exp), preds.shape[1])
    pooled = preds[-1] if exp.refit is not None else preds.mean(axis=0)
    if exp.refit is not None:
        preds = preds[:-1]
    report = replace(evaluate(exp.name, fraction, pooled.ravel(), labels), n=len(exp.split.test))
    exp.reports[fraction] = report
    exp.fold_aucs[fraction] = [roc_auc(p.ravel(), labels)[1] for p in preds]
    return report


def run_na_sweep(exp: Experiment, fractions: Sequence[float] = PAPER_FRACTIONS,
                 na_seed: int | None = None) -> list[EvalReport]:
    return [evaluate_test(exp, float(f), na_seed) for f in fractions]


# ---------------------------------------------------------------------------
# persistence of trained folds


def save_experiment(exp: Experiment, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for fold in exp.folds + ([exp.refit] if exp.refit is not None else []):
        extra = {
            "fold": fold.fold, "best_epoch": fold.best_epoch, "best_val_auc": fold.best_val_auc,
            "model_name": exp.name, "cohort_digest": exp.cohort_digest,
            "norm": {"score_mean": fold.norm.score_mean.tolist(),
                     "score_std": fold.norm.score_std.tolist(),
                     "age_mean": fold.norm.age_mean, "age_std": fold.norm.age_std},
        }
        tag = "refit" if fold is exp.refit else f"fold{fold.fold}"
        path = directory / f"{exp.name}_{tag}.msnn"
        save_checkpoint(fold.model, path, extra)
        paths.append(path)
    return paths


def load_experiment(config: RunConfig, subjects: Sequence[Subject], split: CohortSplit,
                    directory: str | Path, store: VolumeStore | None = None) -> Experiment:
    directory = Path(directory)
    digest = cohort_digest(subjects, split)

    def load(tag: str, k: int) -> FoldResult:
        model, extra = load_checkpoint(directory / f"{config.model}_{tag}.msnn")
        if extra.get("cohort_digest") != digest:
            raise CohortError(f"checkpoint {config.model}_{tag} was trained on another cohort")
        n = extra["norm"]
        norm = Normalizer(np.array(n["score_mean"]), np.array(n["score_std"]), n["age_mean"],
                          n["age_std"])
        return FoldResult(k, model, norm, extra["best_epoch"], extra["best_val_auc"])

    folds = [load(f"fold{k}", k) for k in range(len(split.folds))]
    refit = load("refit", len(folds)) if config.refit else None
    by_id = {s.id: s for s in subjects}
    return Experiment(config, split, folds, by_id, digest, store=store, refit=refit)


def without_train_na(config: RunConfig) -> RunConfig:
    """The multi configuration a multim run is compared against."""
    return replace(config, model="multi")
