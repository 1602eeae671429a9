"""ROI features and the three-member hard-voting ensemble."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import joblib
import numpy as np
from sklearn.ensemble import HistGradientBoostingClassifier, RandomForestClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .imagecore import BACILLI, NON_BACILLI, DataError, DimensionError, Roi

DEFAULT_SPEC = "rgb32+shape6"
SHAPE_SPEC = "shape6"
FEATURE_SPECS = (DEFAULT_SPEC, SHAPE_SPEC)
KINDS = ("svm_rbf", "random_forest", "gradient_boosted_trees")
CHECKPOINT_VERSION = 1
_CODE = {NON_BACILLI: 0, BACILLI: 1}
_LABEL = np.array([NON_BACILLI, BACILLI], dtype=object)


class ClassifierError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    spec_id: str = DEFAULT_SPEC
    region_id: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.isfinite(v).all():
            raise ClassifierError(f"non-finite feature values in {self.region_id or 'vector'}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def shape_color_scalars(roi: Roi) -> np.ndarray:
    """Area, long/short bbox side ratio, extent, mean and std of R-G, mean HSV saturation."""
    _, _, w, h = roi.bbox
    px = roi.pixels.astype(np.float64) / 255.0
    rg = px[..., 0] - px[..., 1]
    mx, mn = px.max(axis=-1), px.min(axis=-1)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    return np.array([roi.area_px, max(w, h) / min(w, h), roi.area_px / (w * h),
                     rg.mean(), rg.std(), sat.mean()])


def featurize(roi: Roi, spec: str = DEFAULT_SPEC) -> FeatureVector:
    """``rgb32+shape6``: 32x32 area-resampled crop in [0, 1] (3072 values) + 6 scalars.

    ``shape6`` keeps only the scalars.
    """
    h, w = roi.pixels.shape[:2]
    if h == 0 or w == 0 or roi.bbox[2] == 0 or roi.bbox[3] == 0:
        raise DimensionError(f"degenerate roi {roi.region_id}")
    scalars = shape_color_scalars(roi)
    if spec == SHAPE_SPEC:
        return FeatureVector(scalars, spec, roi.region_id)
    if spec != DEFAULT_SPEC:
        raise ClassifierError(f"unknown feature spec {spec!r}")
    small = cv2.resize(np.ascontiguousarray(roi.pixels), (32, 32), interpolation=cv2.INTER_AREA)
    return FeatureVector(np.concatenate([small.astype(np.float64).ravel() / 255.0, scalars]),
                         spec, roi.region_id)


def _matrix(samples) -> tuple[np.ndarray, np.ndarray, str]:
    samples = list(samples)
    if not samples:
        raise ClassifierError("no training samples")
    specs = {fv.spec_id for fv, _ in samples}
    if len(specs) != 1:
        raise ClassifierError(f"mixed feature specs {sorted(specs)}")
    X = np.stack([fv.values for fv, _ in samples])
    y = np.array([_CODE[lab] if isinstance(lab, str) else int(lab) for _, lab in samples])
    return X, y, specs.pop()


@dataclass(frozen=True)
class Hyper:
    svm_c: float = 1.0
    svm_gamma: float | None = None  # None -> 1 / n_features
    forest_trees: int = 100
    boost_rounds: int = 100
    boost_depth: int = 3
    boost_learning_rate: float = 0.1
    workers: int = 1


def _estimator(kind: str, hyper: Hyper, n_features: int, seed: int):
    if kind == "svm_rbf":
        gamma = hyper.svm_gamma if hyper.svm_gamma is not None else 1.0 / n_features
        return make_pipeline(StandardScaler(), SVC(C=hyper.svm_c, kernel="rbf", gamma=gamma))
    if kind == "random_forest":
        return RandomForestClassifier(n_estimators=hyper.forest_trees, criterion="gini", max_features="sqrt",
                                      random_state=seed, n_jobs=hyper.workers)
    if kind == "gradient_boosted_trees":
        # histogram split finding; exact splits are too slow on 3078 features
        return HistGradientBoostingClassifier(loss="log_loss", max_iter=hyper.boost_rounds,
                                              max_depth=hyper.boost_depth, max_leaf_nodes=None, min_samples_leaf=1,
                                              learning_rate=hyper.boost_learning_rate,
                                              early_stopping=False, random_state=seed)
    raise ClassifierError(f"unknown classifier kind {kind!r}")


@dataclass(eq=False)
class BaseClassifier:
    kind: str
    estimator: object = field(repr=False)
    spec_id: str
    n_train: tuple[int, int] = (0, 0)  # (bacilli, non_bacilli)

    def predict_codes(self, X) -> np.ndarray:
        return np.asarray(self.estimator.predict(np.atleast_2d(X))).astype(int)

    def predict(self, fv):
        """Label for one :class:`FeatureVector`, or an array of labels for a matrix."""
        if isinstance(fv, FeatureVector):
            if fv.spec_id != self.spec_id:
                raise ClassifierError(f"feature spec {fv.spec_id!r} != model spec {self.spec_id!r}")
            return _LABEL[self.predict_codes(fv.values[None])[0]]
        return _LABEL[self.predict_codes(fv)]

    def accuracy(self, samples) -> float:
        X, y, _ = _matrix(samples)
        return float(np.mean(self.predict_codes(X) == y))


def train_base(kind: str, data, hyper: Hyper = Hyper(), seed: int = 0) -> BaseClassifier:
    X, y, spec = _matrix(data)
    if len(np.unique(y)) < 2:
        raise ClassifierError(f"{kind}: training data holds a single class")
    if not np.isfinite(X).all():
        raise ClassifierError(f"{kind}: non-finite features")
    est = _estimator(kind, hyper, X.shape[1], seed)
    est.fit(X, y)
    return BaseClassifier(kind, est, spec, (int(y.sum()), int(len(y) - y.sum())))


@dataclass(eq=False)
class TrainedEnsemble:
    base_models: list[BaseClassifier]
    individual_variants: list[BaseClassifier]
    feature_spec_id: str
    seed: int = 0
    voting: str = "hard"
    training_report: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.base_models) % 2 == 0:
            raise ClassifierError("hard voting needs an odd number of base models")
        if any(m.spec_id != self.feature_spec_id for m in self.base_models):
            raise ClassifierError("base models disagree on feature spec")

    def votes(self, X) -> np.ndarray:
        """Base predictions as codes, shape (n_models, n_samples)."""
        return np.stack([m.predict_codes(X) for m in self.base_models])

    def predict_codes(self, X) -> np.ndarray:
        v = self.votes(np.atleast_2d(X))
        return (2 * v.sum(axis=0) > len(self.base_models)).astype(int)

    def predict_features(self, fv: FeatureVector) -> str:
        if fv.spec_id != self.feature_spec_id:
            raise ClassifierError(f"feature spec {fv.spec_id!r} != ensemble spec {self.feature_spec_id!r}")
        return _LABEL[self.predict_codes(fv.values[None])[0]]

    def accuracy(self, samples) -> float:
        X, y, _ = _matrix(samples)
        return float(np.mean(self.predict_codes(X) == y))


def predict(ensemble: TrainedEnsemble, roi: Roi) -> str:
    return ensemble.predict_features(featurize(roi, ensemble.feature_spec_id))


def check_pools(pools) -> None:
    if len(pools) != 3:
        raise ClassifierError(f"expected 3 pools, got {len(pools)}")
    seen: dict[str, int] = {}
    for i, pool in enumerate(pools):
        if not pool:
            raise ClassifierError(f"pool {i} is empty")
        n_pos = sum(1 for _, lab in pool if lab in (BACILLI, 1))
        if abs(n_pos / len(pool) - 0.5) > 0.1:
            raise ClassifierError(f"pool {i} is not class-balanced ({n_pos} of {len(pool)} positive)")
        for fv, _ in pool:
            rid = fv.region_id
            if rid is None:
                continue
            if rid in seen and seen[rid] != i:
                raise ClassifierError(f"pools not disjoint: region {rid!r} in pools {seen[rid]} and {i}")
            seen[rid] = i


def train_ensemble(pools, hyper: Hyper = Hyper(), seed: int = 0) -> TrainedEnsemble:
    """Fit svm_rbf, random_forest, gradient_boosted_trees on pools 0, 1, 2
    respectively, then refit all three on the union; the union fits vote.
    """
    pools = [list(p) for p in pools]
    check_pools(pools)
    variants = [train_base(kind, pool, hyper, seed) for kind, pool in zip(KINDS, pools)]
    union = [s for pool in pools for s in pool]
    base = [train_base(kind, union, hyper, seed) for kind in KINDS]
    ens = TrainedEnsemble(base, variants, base[0].spec_id, seed)
    for v, pool in zip(variants, pools):
        ens.training_report.append({"classifier": v.kind, "bacilli": v.n_train[0],
                                    "non_bacilli": v.n_train[1], "accuracy": v.accuracy(pool)})
    n_pos = sum(v.n_train[0] for v in variants)
    ens.training_report.append({"classifier": "ensemble", "bacilli": n_pos,
                                "non_bacilli": len(union) - n_pos, "accuracy": ens.accuracy(union)})
    return ens


def split_pools(samples, n_pools: int = 3, per_class: int | None = None, seed: int = 0):
    """Deal labelled samples into disjoint, class-balanced pools."""
    rng = np.random.default_rng(seed)
    by_label = {BACILLI: [], NON_BACILLI: []}
    for s in samples:
        by_label[s[1]].append(s)
    avail = min(len(v) for v in by_label.values()) // n_pools
    k = avail if per_class is None else min(per_class, avail)
    if k == 0:
        raise ClassifierError("not enough samples of each class to fill the pools")
    pools = [[] for _ in range(n_pools)]
    for lab in (BACILLI, NON_BACILLI):
        items = by_label[lab]
        order = rng.permutation(len(items))[: k * n_pools]
        for j, idx in enumerate(order):
            pools[j // k].append(items[idx])
    return pools


def save_ensemble(ensemble: TrainedEnsemble, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({
        "version": CHECKPOINT_VERSION,
        "feature_spec_id": ensemble.feature_spec_id,
        "seed": ensemble.seed,
        "base_models": ensemble.base_models,
        "individual_variants": ensemble.individual_variants,
        "training_report": ensemble.training_report,
    }, path)


def load_ensemble(path) -> TrainedEnsemble:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"ensemble checkpoint not found: {path}")
    blob = joblib.load(path)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ClassifierError(f"{path}: unsupported ensemble checkpoint version {blob.get('version')!r}")
    return TrainedEnsemble(blob["base_models"], blob["individual_variants"], blob["feature_spec_id"],
                           blob["seed"], training_report=blob["training_report"])
