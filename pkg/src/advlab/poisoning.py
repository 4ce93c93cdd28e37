"""Backdoor patterns and training-set poisoning."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .io import load_tensor, save_tensor

PATTERN_KINDS = ("single_pixel", "additive_global", "patch")


def chessboard(shape):
    """+1/-1 alternation over rows and columns, identical on every channel.

    ``shape`` is ``(C, H, W)``; the top-left pixel is +1.
    """
    c, h, w = shape
    rows, cols = np.indices((h, w))
    board = np.where((rows + cols) % 2 == 0, 1.0, -1.0)
    return np.broadcast_to(board, (c, h, w)).copy()


@dataclass
class BackdoorSpec:
    kind: str
    source: int
    target: int
    count: int = 0
    position: tuple = (0, 0)
    delta: object = 0.25          # scalar or per-channel sequence
    pattern: np.ndarray | None = None
    epsilon: float = 1.0 / 255.0
    patch: np.ndarray | None = None
    mask: np.ndarray | None = None
    pattern_name: str = field(default="", repr=False)

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown backdoor kind {self.kind!r}")
        if self.source == self.target:
            raise ValueError("source and target class must differ")
        if self.epsilon < 0 or self.count < 0:
            raise ValueError("epsilon and count must be non-negative")
        if not np.all(np.isfinite(np.asarray(self.delta, dtype=float))):
            raise ValueError("delta must be finite")
        if self.mask is not None and not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")


def embed(x, spec: BackdoorSpec):
    """Embed the backdoor into one sample or a batch; the result is clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "single_pixel":
        out = x.copy()
        if x.ndim >= 3:
            # (..., C, H, W)
            r, c = spec.position[-2:]
            delta = np.asarray(spec.delta, dtype=np.float64)
            out[..., :, r, c] = out[..., :, r, c] + delta
        else:
            i = spec.position[0]
            out[..., i] = out[..., i] + float(np.asarray(spec.delta).ravel()[0])
        return np.clip(out, 0.0, 1.0)
    if spec.kind == "additive_global":
        return np.clip(x + spec.epsilon * spec.pattern, 0.0, 1.0)
    m = spec.mask
    return x * (1.0 - m) + spec.patch * m


def poison_trainset(dataset: Dataset, spec: BackdoorSpec, seed):
    """Append ``spec.count`` embedded copies of source-class samples labelled ``target``.

    Returns ``(poisoned, poison_indices)``; the indices point at the appended
    rows, so ``poisoned.without(poison_indices)`` gives back the original.
    """
    src = np.flatnonzero(dataset.y == spec.source)
    if spec.count > len(src):
        raise ValueError(f"class {spec.source} has {len(src)} samples, {spec.count} requested")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(src, size=spec.count, replace=False)) if spec.count else src[:0]
    bad = embed(dataset.X[chosen], spec)
    X = np.concatenate([dataset.X, bad])
    y = np.concatenate([dataset.y, np.full(spec.count, spec.target)])
    idx = np.arange(len(dataset), len(dataset) + spec.count)
    prov = "poisoned" if spec.count else dataset.provenance
    return Dataset(X, y, dataset.class_count, prov), idx


def backdoor_test_set(test: Dataset, spec: BackdoorSpec):
    """Every source-class test sample with the backdoor embedded; labels kept."""
    X = test.X[test.y == spec.source]
    return Dataset(embed(X, spec) if len(X) else X, np.full(len(X), spec.source),
                   test.class_count, "attacked")


def attack_success_rate(net, backdoor_set: Dataset, target):
    if len(backdoor_set) == 0:
        return float("nan")
    return float(np.mean(net.predict(backdoor_set.X) == target))


# -- key-value spec files -----------------------------------------------------
#
# [backdoor]
# kind = single_pixel | additive_global | patch
# source = <int>            target = <int>        count = <int>
# position = <row>,<col>    delta = <float>[,<float>...]
# pattern = chessboard | <tensor file>           epsilon = <float>
# patch = <tensor file>     mask = <tensor file>
# shape = <C>,<H>,<W>       (needed for pattern = chessboard)

SPEC_KEYS = {"kind", "source", "target", "count", "position", "delta", "pattern",
             "epsilon", "patch", "mask", "shape"}


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def spec_from_mapping(sec):
    unknown = set(sec) - SPEC_KEYS
    if unknown:
        raise KeyError(f"unknown backdoor keys: {sorted(unknown)}")
    kw = {"kind": sec["kind"], "source": int(sec["source"]), "target": int(sec["target"]),
          "count": int(sec.get("count", 0))}
    if "position" in sec:
        kw["position"] = _ints(sec["position"])
    if "delta" in sec:
        vals = [float(v) for v in sec["delta"].split(",")]
        kw["delta"] = vals[0] if len(vals) == 1 else tuple(vals)
    if "epsilon" in sec:
        kw["epsilon"] = float(sec["epsilon"])
    if "pattern" in sec:
        name = sec["pattern"]
        if name == "chessboard":
            kw["pattern"] = chessboard(_ints(sec["shape"]))
        else:
            kw["pattern"] = load_tensor(name)
        kw["pattern_name"] = name
    if "patch" in sec:
        kw["patch"] = load_tensor(sec["patch"])
    if "mask" in sec:
        kw["mask"] = load_tensor(sec["mask"])
    return BackdoorSpec(**kw)


def load_spec(path):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return spec_from_mapping(dict(cp["backdoor"]))


def save_spec(path, spec: BackdoorSpec, tensor_dir=None):
    sec = {"kind": spec.kind, "source": str(spec.source), "target": str(spec.target),
           "count": str(spec.count)}
    if spec.kind == "single_pixel":
        sec["position"] = ",".join(str(v) for v in spec.position)
        sec["delta"] = ",".join(repr(float(v)) for v in np.atleast_1d(spec.delta))
    elif spec.kind == "additive_global":
        sec["epsilon"] = repr(float(spec.epsilon))
        if spec.pattern_name == "chessboard":
            sec["pattern"] = "chessboard"
            sec["shape"] = ",".join(str(v) for v in spec.pattern.shape)
        else:
            p = f"{tensor_dir}/pattern.bin"
            save_tensor(p, spec.pattern)
            sec["pattern"] = p
    else:
        sec["patch"] = f"{tensor_dir}/patch.bin"
        sec["mask"] = f"{tensor_dir}/mask.bin"
        save_tensor(sec["patch"], spec.patch)
        save_tensor(sec["mask"], spec.mask)
    cp = configparser.ConfigParser()
    cp["backdoor"] = sec
    with open(path, "w") as f:
        cp.write(f)


def save_poison_indices(path, idx):
    with open(path, "w") as f:
        f.write("index\n")
        for i in idx:
            f.write(f"{int(i)}\n")
