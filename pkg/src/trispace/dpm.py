"""Residual fusion of attribute/spatial embeddings and a histogram gradient-boosted regressor."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_ALPHA = 0.1


def fuse(attributes: np.ndarray, spatial: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Hybrid embedding ``attributes + alpha * spatial``."""
    a = np.asarray(attributes, dtype=np.float64)
    s = np.asarray(spatial, dtype=np.float64)
    if a.shape != s.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {s.shape}")
    if alpha == 0:
        return a.copy()
    return a + alpha * s


@dataclass
class HGBConfig:
    max_bins: int = 255
    max_depth: int = 6
    n_rounds: int = 200
    shrinkage: float = 0.1
    min_samples_leaf: int = 5
    l2_reg: float = 0.0
    patience: int = 20

    def __post_init__(self):
        if not 2 <= self.max_bins <= 255:
            raise ValueError("max_bins must be in [2, 255]")
        if self.max_depth < 1 or self.n_rounds < 0 or self.min_samples_leaf < 1:
            raise ValueError("invalid tree limits")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must be in (0, 1]")


def fit_bin_edges(X: np.ndarray, max_bins: int = 255) -> list[np.ndarray]:
    """Per-feature quantile edges; a value goes to bin ``searchsorted(edges, x, 'right')``."""
    edges = []
    for col in np.asarray(X, dtype=np.float64).T:
        u = np.unique(col)
        if len(u) <= max_bins:
            e = (u[:-1] + u[1:]) / 2.0
        else:
            q = np.linspace(0, 100, max_bins + 1)[1:-1]
            e = np.unique(np.percentile(col, q, method="midpoint"))
        edges.append(e)
    return edges


def apply_bins(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape, dtype=np.intp)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="right")
    return out


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray  # bin index; bins <= threshold go left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict_binned(self, B: np.ndarray) -> np.ndarray:
        node = np.zeros(len(B), dtype=np.intp)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            idx = np.flatnonzero(inner)
            go_left = B[idx, feat[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=float if k == "value" else np.intp)
                     for k in ("feature", "threshold", "left", "right", "value")))


def _grow_tree(B, grad, n_bins, cfg: HGBConfig) -> Tree:
    n_feat = B.shape[1]
    width = int(n_bins.max())
    offsets = np.arange(n_feat) * width
    flat = B + offsets
    # invalid split positions: last bin of each feature, and bins beyond a feature's range
    valid = np.arange(width)[None, :] < (n_bins[:, None] - 1)
    lam = cfg.l2_reg

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst in (feature, threshold, left, right):
            lst.append(-1)
        value.append(0.0)
        return len(value) - 1

    root = new_node()
    stack = [(root, np.arange(len(grad)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        g = grad[idx]
        G, n = g.sum(), len(idx)
        value[node] = -G / (n + lam)
        if depth >= cfg.max_depth or n < 2 * cfg.min_samples_leaf:
            continue
        fl = flat[idx].ravel()
        hg = np.bincount(fl, weights=np.repeat(g, n_feat), minlength=n_feat * width).reshape(n_feat, width)
        hn = np.bincount(fl, minlength=n_feat * width).reshape(n_feat, width)
        GL, NL = np.cumsum(hg, axis=1), np.cumsum(hn, axis=1)
        GR, NR = G - GL, n - NL
        ok = valid & (NL >= cfg.min_samples_leaf) & (NR >= cfg.min_samples_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = GL**2 / (NL + lam) + GR**2 / (NR + lam) - G**2 / (n + lam)
        gain = np.where(ok, gain, -np.inf)
        best = int(np.argmax(gain))
        if not gain.flat[best] > 1e-12 * max(G**2 / (n + lam), np.dot(g, g)):
            continue
        f, b = divmod(best, width)
        go_left = B[idx, f] <= b
        feature[node], threshold[node] = f, b
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        stack.append((rnode, idx[~go_left], depth + 1))
        stack.append((lnode, idx[go_left], depth + 1))

    return Tree(np.array(feature, np.intp), np.array(threshold, np.intp), np.array(left, np.intp),
                np.array(right, np.intp), np.array(value, float))


@dataclass
class BoostedModel:
    base_score: float
    shrinkage: float
    bin_edges: list[np.ndarray]
    trees: list[Tree] = field(default_factory=list)
    config: HGBConfig = field(default_factory=HGBConfig)
    label_norm: dict | None = None
    history: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.bin_edges)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predictions in the label units used for fitting (normalized in the pipeline)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        B = apply_bins(X, self.bin_edges)
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.shrinkage * tree.predict_binned(B)
        return out

    def predict_seconds(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pred = self.predict(X)
        if not self.label_norm:
            return pred, pred.copy()
        lo, hi = self.label_norm["label_min"], self.label_norm["label_max"]
        return pred, pred * (hi - lo) + lo if hi != lo else np.full_like(pred, lo)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "base_score": self.base_score,
            "shrinkage": self.shrinkage,
            "bin_edges": [e.tolist() for e in self.bin_edges],
            "trees": [t.to_dict() for t in self.trees],
            "config": asdict(self.config),
            "label_norm": self.label_norm,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        return cls(
            d["base_score"],
            d["shrinkage"],
            [np.array(e, float) for e in d["bin_edges"]],
            [Tree.from_dict(t) for t in d["trees"]],
            HGBConfig(**d["config"]),
            d.get("label_norm"),
            d.get("history", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "BoostedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_hgb(X, y, config: HGBConfig | None = None, X_val=None, y_val=None) -> BoostedModel:
    """Squared-loss boosting of depth-limited histogram trees.

    With a validation set, boosting stops after ``config.patience`` rounds
    without improvement and the ensemble is cut back to the best round.
    ``history`` records per-round training (and validation) MSE.
    """
    cfg = config or HGBConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) with len(y) == n")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")

    edges = fit_bin_edges(X, cfg.max_bins)
    B = apply_bins(X, edges)
    n_bins = np.array([len(e) + 1 for e in edges])
    base = float(y.mean())
    pred = np.full(len(y), base)
    model = BoostedModel(base, cfg.shrinkage, edges, [], cfg)
    train_hist = [float(np.mean((y - pred) ** 2))]

    use_val = X_val is not None and y_val is not None and len(y_val) > 0
    if use_val:
        B_val = apply_bins(X_val, edges)
        y_val = np.asarray(y_val, dtype=np.float64)
        pred_val = np.full(len(y_val), base)
        val_hist = [float(np.mean((y_val - pred_val) ** 2))]
        best_round, best_val = 0, val_hist[0]

    for rnd in range(cfg.n_rounds):
        tree = _grow_tree(B, pred - y, n_bins, cfg)
        if tree.feature[0] < 0 and abs(tree.value[0]) < 1e-15:
            break
        model.trees.append(tree)
        pred += cfg.shrinkage * tree.predict_binned(B)
        train_hist.append(float(np.mean((y - pred) ** 2)))
        if use_val:
            pred_val += cfg.shrinkage * tree.predict_binned(B_val)
            val_hist.append(float(np.mean((y_val - pred_val) ** 2)))
            if val_hist[-1] < best_val:
                best_round, best_val = len(model.trees), val_hist[-1]
            elif len(model.trees) - best_round >= cfg.patience:
                break

    model.history = {"train_mse": train_hist}
    if use_val:
        model.history["val_mse"] = val_hist
        model.history["best_round"] = best_round
        del model.trees[best_round:]
    logger.debug("fit_hgb: %d trees, train mse %.3g", len(model.trees), train_hist[len(model.trees)])
    return model
