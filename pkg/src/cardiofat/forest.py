"""From-scratch random forest of binary information-gain trees.

Training is fully deterministic: tree i draws its bootstrap sample and all of
its per-node attribute subsets from a generator seeded with (seed, i), nodes
are grown in a fixed depth-first order, and gain ties break towards the
lowest attribute index and threshold. The serialized model is therefore a
pure function of (dataset, n_trees, k, seed), whatever the thread count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptModel,
    EmptyDataset,
    RegistrationMismatch,
    SchemaMismatch,
    ValidationError,
    VersionMismatch,
)
from .features import ATTRIBUTE_NAMES, Dataset, FeatureParams, SliceFeatureExtractor
from .imaging import CtScan, FatLabel, LabelMask, apply_fat_window

MODEL_FORMAT_VERSION = 1

#: class index -> mask label (classes never include background).
_CLASS_TO_LABEL = np.array([FatLabel.EPICARDIAL, FatLabel.MEDIASTINAL, FatLabel.OTHER_FAT],
                           dtype=np.uint8)


@dataclass
class DecisionTree:
    """Flat node arrays; feature < 0 marks a leaf holding a distribution."""

    feature: np.ndarray  # (n_nodes,) int32
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray  # (n_nodes,) int32
    right: np.ndarray  # (n_nodes,) int32
    dist: np.ndarray  # (n_nodes, n_classes) float64, leaf rows only

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        cur = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            f = self.feature[cur]
            pending = np.nonzero(f >= 0)[0]
            if pending.size == 0:
                break
            node = cur[pending]
            go_left = X[pending, f[pending]] < self.threshold[node]
            cur[pending] = np.where(go_left, self.left[node], self.right[node])
        return self.dist[cur]


@dataclass
class Forest:
    trees: list[DecisionTree]
    n_trees: int
    k_per_split: int  # as requested; 0 means floor(log2(M)) + 1
    seed: int
    attribute_names: tuple[str, ...]
    class_values: tuple[str, ...]
    target_center: tuple[float, float] | None = None
    feature_params: FeatureParams | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_values)


def resolve_k(k: int, n_attributes: int) -> int:
    """Attributes sampled per split; 0 resolves to floor(log2(M)) + 1."""
    if k < 0:
        raise ValidationError(f"k_per_split must be >= 0, got {k}")
    if k == 0:
        return int(math.floor(math.log2(n_attributes))) + 1
    return min(k, n_attributes)


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def _best_split(X, y, idx, n_classes, rng, k):
    """Highest-gain (attribute, midpoint) over k sampled attributes, or None.

    Ties keep the lowest attribute index, then the lowest threshold; both
    follow from evaluating attributes in ascending order with strict
    improvement and taking the first argmax over sorted boundaries.
    """
    n = idx.size
    attrs = np.sort(rng.choice(X.shape[1], size=k, replace=False))
    yy = y[idx]
    parent = float(_entropy_rows(np.bincount(yy, minlength=n_classes) / n))
    best_gain = 0.0
    best = None
    for j in attrs:
        v = X[idx, j]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        boundaries = np.nonzero(vs[1:] != vs[:-1])[0] + 1
        if boundaries.size == 0:
            continue
        onehot = np.zeros((n, n_classes), dtype=np.float64)
        onehot[np.arange(n), yy[order]] = 1.0
        cum = onehot.cumsum(axis=0)
        left_counts = cum[boundaries - 1]
        right_counts = cum[-1] - left_counts
        nl = boundaries.astype(np.float64)
        nr = n - nl
        h_left = _entropy_rows(left_counts / nl[:, None])
        h_right = _entropy_rows(right_counts / nr[:, None])
        gains = parent - (nl / n) * h_left - (nr / n) * h_right
        bi = int(np.argmax(gains))
        if gains[bi] > best_gain:
            pos = int(boundaries[bi])
            a, b = float(vs[pos - 1]), float(vs[pos])
            t = 0.5 * (a + b)
            if not a < t:  # midpoint rounded onto the lower value
                t = b
            best_gain = float(gains[bi])
            best = (int(j), t)
    if best is None:
        return None
    j, t = best
    mask = X[idx, j] < t
    return j, t, idx[mask], idx[~mask]


def train_tree(dataset: Dataset, rng: np.random.Generator, k_per_split: int,
               min_leaf: int = 1) -> DecisionTree:
    """Grow one unpruned tree: split while impure and gain is positive."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    return _grow_tree(dataset.X, dataset.y, len(dataset.class_values), rng,
                      resolve_k(k_per_split, dataset.n_attributes), min_leaf)


def _grow_tree(X, y, n_classes, rng, k, min_leaf) -> DecisionTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    dists: list[np.ndarray | None] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        dists.append(None)
        return len(feature) - 1

    stack = [(new_node(), np.arange(X.shape[0], dtype=np.intp))]
    while stack:
        node, idx = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes)
        if idx.size < min_leaf or counts.max() == idx.size:
            dists[node] = counts / idx.size
            continue
        split = _best_split(X, y, idx, n_classes, rng, k)
        if split is None:
            dists[node] = counts / idx.size
            continue
        j, t, idx_l, idx_r = split
        feature[node] = j
        threshold[node] = t
        node_l, node_r = new_node(), new_node()
        left[node] = node_l
        right[node] = node_r
        stack.append((node_r, idx_r))  # LIFO: grow the left subtree first
        stack.append((node_l, idx_l))

    dist = np.zeros((len(feature), n_classes), dtype=np.float64)
    for i, d in enumerate(dists):
        if d is not None:
            dist[i] = d
    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        dist=dist,
    )


def train_forest(dataset: Dataset, n_trees: int = 10, k: int = 0, seed: int = 1,
                 target_center: tuple[float, float] | None = None,
                 feature_params: FeatureParams | None = None,
                 threads: int = 1) -> Forest:
    """Bag ``n_trees`` trees, each on a bootstrap drawn from rng(seed, i)."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if n_trees < 1:
        raise ValidationError(f"need at least one tree, got {n_trees}")
    n = len(dataset)
    k_eff = resolve_k(k, dataset.n_attributes)

    def build(i: int) -> DecisionTree:
        rng = np.random.default_rng([seed, i])
        boot = rng.integers(0, n, size=n)
        return _grow_tree(dataset.X[boot], dataset.y[boot], len(dataset.class_values),
                          rng, k_eff, 1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(build, range(n_trees)))
    else:
        trees = [build(i) for i in range(n_trees)]
    return Forest(trees=trees, n_trees=n_trees, k_per_split=k, seed=seed,
                  attribute_names=tuple(dataset.attribute_names),
                  class_values=tuple(dataset.class_values),
                  target_center=target_center, feature_params=feature_params)


def predict_proba(forest: Forest, X) -> np.ndarray:
    """Mean of the trees' leaf distributions, one row per input vector."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(forest.attribute_names):
        raise SchemaMismatch(
            f"vector has {X.shape[1]} attributes, model expects {len(forest.attribute_names)}"
        )
    total = np.zeros((X.shape[0], forest.n_classes), dtype=np.float64)
    for tree in forest.trees:
        total += tree.predict_proba(X)
    return total / len(forest.trees)


def predict_labels(forest: Forest, X) -> np.ndarray:
    """Argmax class indices; ties go to the lowest index in schema order."""
    return np.argmax(predict_proba(forest, X), axis=1)


def predict(forest: Forest, feature_vector) -> tuple[str, np.ndarray]:
    probs = predict_proba(forest, feature_vector)[0]
    return forest.class_values[int(np.argmax(probs))], probs


def segment_scan(scan: CtScan, forest: Forest,
                 scan_target_center: tuple[float, float] | None = None) -> list[LabelMask]:
    """Classify every fat pixel of a registered scan into per-slice masks.

    ``scan_target_center`` is the common point the scan was registered to;
    when both it and the model's recorded centre are known they must agree.
    Background pixels stay background.
    """
    if (forest.target_center is not None and scan_target_center is not None
            and tuple(forest.target_center) != tuple(scan_target_center)):
        raise RegistrationMismatch(
            f"scan registered to {tuple(scan_target_center)}, "
            f"model trained at {tuple(forest.target_center)}"
        )
    if tuple(forest.attribute_names) != ATTRIBUTE_NAMES:
        raise SchemaMismatch("model schema does not match the feature extractor")
    params = forest.feature_params if forest.feature_params is not None else FeatureParams()
    stack = np.stack([apply_fat_window(s.values, params.window) for s in scan.slices])
    masks = []
    for zi, slc in enumerate(scan.slices):
        windowed = stack[zi]
        ys, xs = np.nonzero(windowed)
        labels = np.zeros(windowed.shape, dtype=np.uint8)
        if ys.size:
            extractor = SliceFeatureExtractor(stack, zi, params, z_value=slc.z_index)
            rows = extractor.rows(xs, ys)
            labels[ys, xs] = _CLASS_TO_LABEL[predict_labels(forest, rows)]
        masks.append(LabelMask(labels=labels, z_index=slc.z_index))
    return masks


# -- persistence ----------------------------------------------------------------

def _tree_to_nodes(tree: DecisionTree) -> list[dict]:
    nodes = []
    for i in range(tree.n_nodes):
        if tree.feature[i] < 0:
            nodes.append({"p": [float(v) for v in tree.dist[i]]})
        else:
            nodes.append({"a": int(tree.feature[i]), "t": float(tree.threshold[i]),
                          "l": int(tree.left[i]), "r": int(tree.right[i])})
    return nodes


def _tree_from_nodes(nodes: list[dict], n_classes: int) -> DecisionTree:
    n = len(nodes)
    feature = np.full(n, -1, dtype=np.int32)
    threshold = np.zeros(n, dtype=np.float64)
    left = np.full(n, -1, dtype=np.int32)
    right = np.full(n, -1, dtype=np.int32)
    dist = np.zeros((n, n_classes), dtype=np.float64)
    for i, node in enumerate(nodes):
        if "p" in node:
            p = np.asarray(node["p"], dtype=np.float64)
            if p.shape != (n_classes,):
                raise CorruptModel(f"leaf {i} has {p.shape[0]} classes, expected {n_classes}")
            dist[i] = p
        else:
            feature[i] = node["a"]
            threshold[i] = node["t"]
            left[i] = node["l"]
            right[i] = node["r"]
            if not (0 <= node["l"] < n and 0 <= node["r"] < n):
                raise CorruptModel(f"node {i} has children outside the node table")
    return DecisionTree(feature=feature, threshold=threshold, left=left, right=right, dist=dist)


def forest_to_json(forest: Forest) -> str:
    """Canonical single-line JSON; field order is fixed for byte-stable round trips."""
    model = {
        "format_version": MODEL_FORMAT_VERSION,
        "schema": {
            "attributes": list(forest.attribute_names),
            "class_values": list(forest.class_values),
        },
        "params": {
            "n_trees": forest.n_trees,
            "k_per_split": forest.k_per_split,
            "seed": forest.seed,
            "features": None if forest.feature_params is None else forest.feature_params.to_dict(),
        },
        "target_center": None if forest.target_center is None else list(forest.target_center),
        "trees": [{"nodes": _tree_to_nodes(t)} for t in forest.trees],
    }
    return json.dumps(model, separators=(",", ":")) + "\n"


def save_model(forest: Forest, path: Path | str) -> None:
    Path(path).write_text(forest_to_json(forest))


def load_model(path: Path | str) -> Forest:
    try:
        text = Path(path).read_text()
        model = json.loads(text)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModel(f"{path}: {exc}") from exc
    if not isinstance(model, dict) or "format_version" not in model:
        raise CorruptModel(f"{path}: not a model file")
    if model["format_version"] != MODEL_FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {model['format_version']}, expected {MODEL_FORMAT_VERSION}"
        )
    try:
        schema = model["schema"]
        params = model["params"]
        class_values = tuple(schema["class_values"])
        feature_params = params.get("features")
        target_center = model["target_center"]
        forest = Forest(
            trees=[_tree_from_nodes(t["nodes"], len(class_values)) for t in model["trees"]],
            n_trees=int(params["n_trees"]),
            k_per_split=int(params["k_per_split"]),
            seed=int(params["seed"]),
            attribute_names=tuple(schema["attributes"]),
            class_values=class_values,
            target_center=None if target_center is None else tuple(float(v) for v in target_center),
            feature_params=None if feature_params is None else FeatureParams.from_dict(feature_params),
        )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise CorruptModel(f"{path}: {exc}") from exc
    if len(forest.trees) != forest.n_trees:
        raise CorruptModel(f"{path}: {len(forest.trees)} trees, header says {forest.n_trees}")
    return forest
