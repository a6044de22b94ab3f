"""Surrogate regressors z -> d used to build the super-ensemble covariance.

Three kinds are available: ridge-regularized linear least squares (joint over
outputs), bagged regression trees (one forest per output) and gradient-boosted
trees (one boosted sequence per output).  Fitting uses a seeded 80/20
train/validation split and records per-output validation RMSE.
"""
from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import sklearn
from sklearn.tree import DecisionTreeRegressor

from .fieldcore import Ensemble, RngStream

PROXY_MAGIC = b"CHML"
PROXY_VERSION = 1

KINDS = {
    "linear": "linear",
    "random-forest": "random-forest",
    "rf": "random-forest",
    "gradient-boosted-trees": "gradient-boosted-trees",
    "gbt": "gradient-boosted-trees",
}

DEFAULT_PARAMS = {
    "linear": {"ridge": 1e-8},
    "random-forest": {"n_estimators": 100, "max_depth": None, "min_samples_leaf": 2,
                      "max_features": "sqrt", "bootstrap": True},
    "gradient-boosted-trees": {"n_estimators": 100, "max_depth": 6, "learning_rate": 0.3},
}


def canonical_kind(kind: str) -> str:
    try:
        return KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown proxy kind {kind!r}") from None


@dataclass
class ProxyModel:
    kind: str
    n_features: int
    n_outputs: int
    params: dict
    state: dict
    meta: dict = field(default_factory=dict)

    def predict(self, z) -> np.ndarray:
        return predict(self, z)


# ---------------------------------------------------------------------------
# data helpers

def _as_matrix(X) -> np.ndarray:
    if isinstance(X, Ensemble):
        return X.matrix()
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(X.shape[0], -1) if X.ndim > 2 else X


def split_indices(n: int, rng: RngStream, val_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``round(val_frac n)`` rows validate."""
    perm = rng.permutation(n)
    n_val = min(max(int(round(val_frac * n)), 1), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# linear

def _fit_linear(X, D, params):
    lam = float(params["ridge"])
    xm = X.mean(axis=0)
    dm = D.mean(axis=0)
    Xc = X - xm
    Dc = D - dm
    n, p = Xc.shape
    if p <= n:
        A = Xc.T @ Xc
        A[np.diag_indices_from(A)] += lam
        W = scipy.linalg.solve(A, Xc.T @ Dc, assume_a="pos")
    else:
        # dual form of the same ridge problem
        G = Xc @ Xc.T
        G[np.diag_indices_from(G)] += lam
        W = Xc.T @ scipy.linalg.solve(G, Dc, assume_a="pos")
    W = np.ascontiguousarray(W)
    return {"W": W, "b": dm - xm @ W}


def _predict_linear(state, X):
    # row-by-row products so a batch prediction equals single predictions bitwise
    W, b = np.ascontiguousarray(state["W"]), state["b"]
    out = np.empty((X.shape[0], W.shape[1]))
    for i in range(X.shape[0]):
        out[i] = X[i] @ W + b
    return out


# ---------------------------------------------------------------------------
# packed trees (random forest)

def _pack(trees: list) -> dict:
    left, right, feat, thr, val, roots = [], [], [], [], [], []
    off = 0
    depth = 0
    for t in trees:
        tr = t.tree_
        l = tr.children_left.astype(np.int64)
        r = tr.children_right.astype(np.int64)
        left.append(np.where(l >= 0, l + off, -1))
        right.append(np.where(r >= 0, r + off, -1))
        feat.append(np.maximum(tr.feature, 0).astype(np.int64))
        thr.append(tr.threshold.astype(np.float64))
        val.append(tr.value[:, 0, 0].astype(np.float64))
        roots.append(off)
        off += tr.node_count
        depth = max(depth, tr.max_depth)
    return {"left": np.concatenate(left), "right": np.concatenate(right), "feature": np.concatenate(feat),
            "threshold": np.concatenate(thr), "value": np.concatenate(val),
            "roots": np.asarray(roots, dtype=np.int64), "depth": np.array([depth], dtype=np.int64)}


def _constant_tree(value: float) -> dict:
    return {"left": np.array([-1]), "right": np.array([-1]), "feature": np.array([0]),
            "threshold": np.array([0.0]), "value": np.array([float(value)])}


def _traverse(state, X32, tree_ids) -> np.ndarray:
    left, right = state["left"], state["right"]
    feat, thr = state["feature"], state["threshold"]
    n = X32.shape[0]
    rows = np.arange(n)[None, :]
    idx = np.repeat(state["roots"][tree_ids][:, None], n, axis=1)
    for _ in range(int(state["depth"][0])):
        leaf = left[idx] < 0
        if leaf.all():
            break
        xv = X32[rows, feat[idx]].astype(np.float64)
        nxt = np.where(xv <= thr[idx], left[idx], right[idx])
        idx = np.where(leaf, idx, nxt)
    return state["value"][idx]


def _fit_forest(X, D, params, rng: RngStream):
    n, p = X.shape
    B = int(params["n_estimators"])
    depth = params["max_depth"]
    if depth == 0:
        # constant model: every tree is the training-split mean
        means = D.mean(axis=0)
        return _pack_dicts([_constant_tree(means[j]) for j in range(D.shape[1]) for _ in range(B)], B)
    X32 = np.asfortranarray(X, dtype=np.float32)
    trees = []
    # parameters are fixed above, so per-tree validation is skipped for speed
    with sklearn.config_context(skip_parameter_validation=True, assume_finite=True):
        for j in range(D.shape[1]):
            orng = rng.fork(f"rf-output-{j}")
            feature_rs = np.random.RandomState(int(orng.integers(0, 2**31 - 1)))
            y = np.ascontiguousarray(D[:, j])
            for b in range(B):
                if params["bootstrap"]:
                    w = np.bincount(orng.integers(0, n, size=n), minlength=n).astype(np.float64)
                else:
                    w = np.ones(n)
                t = DecisionTreeRegressor(max_depth=depth, min_samples_leaf=int(params["min_samples_leaf"]),
                                          max_features=params["max_features"], random_state=feature_rs)
                t.fit(X32, y, sample_weight=w, check_input=False)
                trees.append(t)
    state = _pack(trees)
    state["n_per_output"] = np.array([B], dtype=np.int64)
    return state


def _pack_dicts(parts, B):
    off = 0
    out = {k: [] for k in ("left", "right", "feature", "threshold", "value")}
    roots = []
    for d in parts:
        for k in out:
            v = d[k]
            if k in ("left", "right"):
                v = np.where(v >= 0, v + off, -1)
            out[k].append(v)
        roots.append(off)
        off += d["value"].size
    state = {k: np.concatenate(v) for k, v in out.items()}
    state["roots"] = np.asarray(roots, dtype=np.int64)
    state["depth"] = np.array([0], dtype=np.int64)
    state["n_per_output"] = np.array([B], dtype=np.int64)
    return state


def _predict_forest(state, X, n_outputs, chunk_trees: int = 1024):
    X32 = np.asarray(X, dtype=np.float32)
    n = X32.shape[0]
    B = int(state["n_per_output"][0])
    acc = np.zeros((n_outputs, n))
    total = n_outputs * B
    for lo in range(0, total, chunk_trees):
        ids = np.arange(lo, min(lo + chunk_trees, total))
        vals = _traverse(state, X32, ids)
        # fixed-order accumulation keeps batch and single predictions bitwise equal
        for k, tid in enumerate(ids):
            acc[tid // B] += vals[k]
    return (acc / B).T


# ---------------------------------------------------------------------------
# gradient-boosted trees

def _fit_boosted(X, D, params, rng: RngStream):
    lo, hi = D.min(axis=0), D.max(axis=0)
    mean = D.mean(axis=0)
    std = D.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    state = {"y_mean": mean, "y_scale": scale, "y_min": lo, "y_max": hi}
    if params["max_depth"] == 0 or np.all(std == 0):
        state["booster"] = np.zeros(0, dtype=np.uint8)
        return state
    import xgboost as xgb

    Y = (D - mean) / scale
    model = xgb.XGBRegressor(n_estimators=int(params["n_estimators"]), max_depth=int(params["max_depth"]),
                             learning_rate=float(params["learning_rate"]), objective="reg:squarederror",
                             multi_strategy="one_output_per_tree", n_jobs=int(params.get("n_jobs", 1)),
                             random_state=int(rng.integers(0, 2**31 - 1)))
    model.fit(np.asarray(X, dtype=np.float32), Y)
    raw = model.get_booster().save_raw(raw_format="ubj")
    state["booster"] = np.frombuffer(bytes(raw), dtype=np.uint8).copy()
    return state


_BOOSTER_CACHE: dict[int, object] = {}


def _booster(state):
    key = id(state["booster"])
    b = _BOOSTER_CACHE.get(key)
    if b is None or b[0] is not state["booster"]:
        import xgboost as xgb

        bst = xgb.Booster()
        bst.load_model(bytearray(state["booster"].tobytes()))
        bst.set_param({"nthread": 1})
        b = (state["booster"], bst)
        _BOOSTER_CACHE[key] = b
    return b[1]


def _predict_boosted(state, X, n_outputs):
    n = X.shape[0]
    if state["booster"].size == 0:
        out = np.broadcast_to(state["y_mean"], (n, n_outputs)).copy()
    else:
        p = np.asarray(_booster(state).inplace_predict(np.asarray(X, dtype=np.float32)), dtype=np.float64)
        out = state["y_mean"] + state["y_scale"] * p.reshape(n, n_outputs)
    # boosted sums can leave the target range; keep tree predictions inside it
    return np.clip(out, state["y_min"], state["y_max"])


# ---------------------------------------------------------------------------
# public API

def fit(kind: str, X, D, rng: RngStream, params: dict | None = None, val_frac: float = 0.2) -> ProxyModel:
    """Fit a proxy on the training split and score it on the validation split."""
    kind = canonical_kind(kind)
    X = _as_matrix(X)
    D = np.asarray(D, dtype=np.float64)
    if D.ndim == 1:
        D = D[:, None]
    if X.shape[0] != D.shape[0]:
        raise ValueError("X and D must have the same number of rows")
    if X.shape[0] < 10:
        raise ValueError("proxy fitting needs at least 10 members")
    full = dict(DEFAULT_PARAMS[kind])
    for k, v in (params or {}).items():
        if k not in full and k != "n_jobs":
            raise KeyError(f"unknown {kind} parameter {k!r}")
        full[k] = v
    split_rng = rng.fork("split")
    tr, va = split_indices(X.shape[0], split_rng, val_frac)
    t0 = time.perf_counter()
    if kind == "linear":
        state = _fit_linear(X[tr], D[tr], full)
    elif kind == "random-forest":
        state = _fit_forest(X[tr], D[tr], full, rng.fork("fit"))
    else:
        state = _fit_boosted(X[tr], D[tr], full, rng.fork("fit"))
    fit_seconds = max(time.perf_counter() - t0, 1e-9)
    m = ProxyModel(kind, X.shape[1], D.shape[1], full, state)
    resid = predict_batch(m, X[va]) - D[va]
    per = np.sqrt(np.mean(resid ** 2, axis=0))
    m.meta = {
        "n_members": int(X.shape[0]),
        "n_train": int(tr.size),
        "n_val": int(va.size),
        "split_seed": int(split_rng.seed),
        "split_stream": int(split_rng.stream_id),
        "val_rmse_per_output": per.tolist(),
        "val_rmse_total": float(np.sqrt(np.mean(resid ** 2))),
        "fit_seconds": fit_seconds,
        "train_index": tr.tolist(),
        "val_index": va.tolist(),
    }
    return m


def predict_batch(m: ProxyModel, Z) -> np.ndarray:
    Z = _as_matrix(Z)
    if Z.shape[1] != m.n_features:
        raise ValueError(f"expected {m.n_features} parameters per field, got {Z.shape[1]}")
    if m.kind == "linear":
        out = _predict_linear(m.state, Z)
    elif m.kind == "random-forest":
        out = _predict_forest(m.state, Z, m.n_outputs)
    else:
        out = _predict_boosted(m.state, Z, m.n_outputs)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("proxy produced non-finite predictions")
    return out


def predict(m: ProxyModel, z) -> np.ndarray:
    """Prediction for one field (LogPermField or flat vector)."""
    flat = z.flat if hasattr(z, "flat") and not isinstance(z, np.ndarray) else np.asarray(z, dtype=np.float64).ravel()
    if flat.size != m.n_features:
        raise ValueError(f"expected {m.n_features} parameters, got {flat.size}")
    return predict_batch(m, flat[None, :])[0]


def validation_report(m: ProxyModel) -> dict:
    return {
        "kind": m.kind,
        "rmse_total": m.meta["val_rmse_total"],
        "rmse_per_output": list(m.meta["val_rmse_per_output"]),
        "fit_seconds": m.meta["fit_seconds"],
        "n_members": m.meta["n_members"],
        "split_seed": m.meta["split_seed"],
    }


def write_validation_csv(path, m: ProxyModel) -> None:
    rep = validation_report(m)
    lines = ["output,val_rmse"]
    lines += [f"{j},{v!r}" for j, v in enumerate(rep["rmse_per_output"])]
    lines.append(f"total,{rep['rmse_total']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# persistence: "CHML", u16 version, u16 kind length, kind, u32 json length,
# json header (params, meta, array directory), then raw little-endian arrays.

_HEAD = struct.Struct("<4sHH")


def save_proxy(path, m: ProxyModel) -> None:
    names = sorted(m.state)
    directory = []
    blobs = io.BytesIO()
    for k in names:
        a = np.ascontiguousarray(m.state[k])
        a = a.astype(a.dtype.newbyteorder("<"))
        directory.append({"name": k, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.write(a.tobytes())
    header = json.dumps({"n_features": m.n_features, "n_outputs": m.n_outputs, "params": m.params,
                         "meta": m.meta, "arrays": directory}, sort_keys=True).encode("utf-8")
    kind = m.kind.encode("ascii")
    Path(path).write_bytes(_HEAD.pack(PROXY_MAGIC, PROXY_VERSION, len(kind)) + kind
                           + struct.pack("<I", len(header)) + header + blobs.getvalue())


def load_proxy(path) -> ProxyModel:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size or buf[:4] != PROXY_MAGIC:
        raise ValueError(f"{path}: not a proxy model file")
    _, version, klen = _HEAD.unpack_from(buf, 0)
    if version != PROXY_VERSION:
        raise ValueError(f"{path}: unsupported proxy-file version {version}")
    off = _HEAD.size
    kind = buf[off:off + klen].decode("ascii")
    off += klen
    (hlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    state = {}
    for d in header["arrays"]:
        dt = np.dtype(d["dtype"])
        count = int(math.prod(d["shape"]))
        a = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(d["shape"]).copy()
        off += count * dt.itemsize
        state[d["name"]] = a
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return ProxyModel(canonical_kind(kind), header["n_features"], header["n_outputs"], header["params"],
                      state, header["meta"])
