"""Synthetic federated datasets with planted mixture structure, covariate
shifts for novelty tests, and the comma-separated dataset file format."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.stats import norm

from ._rng import stream
from .errors import ConfigError, DataError, DataFormatError
from .model import LabeledDataset

FAMILIES = ("gaussian", "laplace", "beta", "figure1")
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
FORMAT_VERSION = 1

FIGURE1_MEANS = (-2.0, 2.0)
FIGURE1_STD = 1.5


@dataclass
class SyntheticSpec:
    family: str = "gaussian"
    M: int = 3
    d: int = 32
    C: int = 300
    n: int = 3000
    alpha: float = 0.4
    seed: int = 0
    mean_scale: float = 3.0
    min_separation: float = 0.0

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if min(self.M, self.d, self.C, self.n) < 1:
            raise ConfigError("M, d, C and n must all be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.family == "figure1" and self.d != 1:
            raise ConfigError("figure1 data are one-dimensional")
        if self.family == "figure1" and 2 * self.n < self.C:
            raise ConfigError(f"figure1 with n={self.n} per component leaves some of the {self.C} clients empty")


@dataclass
class ClientData:
    client_id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    def split(self, name):
        return getattr(self, name)

    def all(self):
        return LabeledDataset(
            np.concatenate([self.train.x, self.val.x, self.test.x]),
            np.concatenate([self.train.y, self.val.y, self.test.y]),
            self.client_id,
            "all",
        )


@dataclass
class PlantedTruth:
    family: str
    means: np.ndarray  # (M, d) component means (labelling hyperplanes pass through them)
    directions: np.ndarray  # (M, d)
    client_pis: np.ndarray  # (C, M)
    latent: dict = field(default_factory=dict)  # (client_id, split) -> z array
    beta_a: np.ndarray | None = None
    beta_b: np.ndarray | None = None
    scale: float = 1.0

    def label(self, x, z):
        """Planted labelling function F^(z)(x) = 1{(x - mean_z) . v_z > 0}."""
        x = np.atleast_2d(x)
        z = np.atleast_1d(z)
        return (((x - self.means[z]) * self.directions[z]).sum(axis=1) > 0).astype(np.int64)

    def to_json(self):
        out = {
            "family": self.family,
            "means": self.means.tolist(),
            "directions": self.directions.tolist(),
            "client_pis": self.client_pis.tolist(),
            "scale": self.scale,
            "latent": {f"{cid}:{split}": z.tolist() for (cid, split), z in sorted(self.latent.items())},
        }
        if self.beta_a is not None:
            out["beta_a"] = self.beta_a.tolist()
            out["beta_b"] = self.beta_b.tolist()
        return out

    @classmethod
    def from_json(cls, obj):
        latent = {}
        for key, z in obj.get("latent", {}).items():
            cid, split = key.split(":")
            latent[(int(cid), split)] = np.asarray(z, dtype=np.int64)
        return cls(
            obj["family"],
            np.asarray(obj["means"], dtype=np.float64),
            np.asarray(obj["directions"], dtype=np.float64),
            np.asarray(obj["client_pis"], dtype=np.float64),
            latent,
            None if "beta_a" not in obj else np.asarray(obj["beta_a"]),
            None if "beta_b" not in obj else np.asarray(obj["beta_b"]),
            float(obj.get("scale", 1.0)),
        )


# ---------------------------------------------------------------------------
# generation


def _split_counts(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def _gaussian_means(spec, rng):
    for _ in range(10_000):
        means = rng.normal(0.0, spec.mean_scale, (spec.M, spec.d))
        if spec.M == 1 or spec.min_separation <= 0:
            return means
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        if gaps[np.triu_indices(spec.M, 1)].min() >= spec.min_separation:
            return means
    raise ConfigError(f"could not place {spec.M} means at separation {spec.min_separation}")


def _laplace_means(spec, rng):
    # coordinates on a grid of spacing 4; rows kept distinct
    while True:
        means = 4.0 * rng.integers(-2, 3, (spec.M, spec.d)).astype(np.float64)
        if len(np.unique(means, axis=0)) == spec.M:
            return means


def _assemble(cid, x, y, z, truth):
    parts = {}
    start = 0
    for name, count in zip(SPLITS, _split_counts(len(y))):
        sl = slice(start, start + count)
        parts[name] = LabeledDataset(x[sl], y[sl], cid, name)
        truth.latent[(cid, name)] = z[sl].copy()
        start += count
    return ClientData(cid, parts["train"], parts["val"], parts["test"])


def generate_synthetic(spec):
    """Per-client datasets drawn from a planted mixture, plus the planted truth.

    Each client draws mixture weights from Dir(alpha), a latent component per
    sample, the input from that component, and the label from the component's
    hyperplane.  Samples are split 60/20/20 into train/val/test.
    """
    spec.validate()
    if spec.family == "figure1":
        return generate_figure1(spec.n, spec.seed, clients=spec.C)
    g = stream(spec.seed, "datagen", 0)
    beta_a = beta_b = None
    if spec.family == "gaussian":
        means = _gaussian_means(spec, g)
    elif spec.family == "laplace":
        means = _laplace_means(spec, g)
    else:
        beta_a = g.uniform(2.0, 5.0, (spec.M, spec.d))
        beta_b = g.uniform(2.0, 5.0, (spec.M, spec.d))
        means = beta_a / (beta_a + beta_b)
    directions = g.normal(size=(spec.M, spec.d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    pis = np.empty((spec.C, spec.M))
    truth = PlantedTruth(spec.family, means, directions, pis, {}, beta_a, beta_b)
    clients = []
    for cid in range(spec.C):
        rng = stream(spec.seed, "datagen", 1, cid)
        pis[cid] = rng.dirichlet(np.full(spec.M, spec.alpha))
        z = rng.choice(spec.M, size=spec.n, p=pis[cid])
        if spec.family == "gaussian":
            x = means[z] + rng.normal(size=(spec.n, spec.d))
        elif spec.family == "laplace":
            x = means[z] + rng.laplace(0.0, 1.0, (spec.n, spec.d))
        else:
            x = rng.beta(beta_a[z], beta_b[z])
        clients.append(_assemble(cid, x, truth.label(x, z), z, truth))
    return clients, truth


def figure1_client_pis(clients):
    """Weight on the left component for each of ``clients`` clients, spread over [0.35, 0.65]."""
    if clients == 1:
        return np.array([[0.5, 0.5]])
    left = np.linspace(0.35, 0.65, clients)
    return np.column_stack([left, 1.0 - left])


def generate_figure1(n_per_component, seed, clients=4):
    """Two 1-D Gaussian components at -2 and +2 (std 1.5) labelled y = 1{x < mean}.

    ``2 * n_per_component`` samples are spread evenly over ``clients`` clients,
    each with its own weight on the two components.
    """
    if n_per_component < 1 or clients < 1:
        raise ConfigError("n_per_component and clients must be >= 1")
    pis = figure1_client_pis(clients)
    means = np.array(FIGURE1_MEANS)[:, None]
    truth = PlantedTruth("figure1", means, -np.ones((2, 1)), pis, {}, scale=FIGURE1_STD)
    total = 2 * n_per_component
    sizes = np.full(clients, total // clients)
    sizes[: total % clients] += 1
    out = []
    for cid in range(clients):
        rng = stream(seed, "datagen", 1, cid)
        z = rng.choice(2, size=int(sizes[cid]), p=pis[cid])
        x = (means[z, 0] + FIGURE1_STD * rng.normal(size=z.size))[:, None]
        out.append(_assemble(cid, x, truth.label(x, z), z, truth))
    return out, truth


def figure1_bayes_accuracy(pi_left):
    """Bayes-optimal accuracy of one client with weight ``pi_left`` on the left component.

    Outside (-2, 2) both labelling functions agree; inside, the optimal rule
    picks the component with the larger weighted density.  The error is the
    integral of the smaller weighted density over that interval.
    """
    lo, hi = FIGURE1_MEANS

    def smaller(x):
        return min(pi_left * norm.pdf(x, lo, FIGURE1_STD), (1 - pi_left) * norm.pdf(x, hi, FIGURE1_STD))

    err, _ = integrate.quad(smaller, lo, hi, limit=200, epsabs=1e-12)
    return 1.0 - err


# ---------------------------------------------------------------------------
# transforms


@dataclass
class ShiftSpec:
    """Affine covariate shift x -> scale * R(plane, angle) * reflect(x)."""

    scale: float = 1.0
    angle: float = 0.0  # degrees
    plane: tuple = (0, 1)
    reflect_axis: int | None = None

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError("shift scale must be positive")


def shift_matrix(shift, d):
    a = np.eye(d)
    if shift.reflect_axis is not None:
        if not 0 <= shift.reflect_axis < d:
            raise ConfigError(f"reflection axis {shift.reflect_axis} out of range for d={d}")
        a[shift.reflect_axis, shift.reflect_axis] = -1.0
    if shift.angle % 360 != 0:
        i, j = shift.plane
        if not (0 <= i < d and 0 <= j < d and i != j):
            raise ConfigError(f"rotation plane {shift.plane} invalid for d={d}")
        theta = math.radians(shift.angle)
        c, s = math.cos(theta), math.sin(theta)
        # exact values for quarter turns
        if shift.angle % 90 == 0:
            c, s = round(c), round(s)
        r = np.eye(d)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        a = r @ a
    return shift.scale * a


def apply_shift(data, shift):
    """Shifted copy of ``data``; labels are untouched."""
    a = shift_matrix(shift, data.dim)
    if np.array_equal(a, np.eye(data.dim)):
        x = data.x.copy()
    else:
        x = data.x @ a.T
    return LabeledDataset(x, data.y.copy(), data.client_id, data.split)


def permute_labels(data, perm):
    """Relabel y -> perm[y], e.g. to plant conditional outliers."""
    perm = np.asarray(perm, dtype=np.int64)
    return LabeledDataset(data.x.copy(), perm[data.y], data.client_id, data.split)


# ---------------------------------------------------------------------------
# file format


def write_dataset(path, clients, n_classes=None):
    """Write ``clients`` (list of ClientData) to ``path``.

    The header holds ``version``, ``d``, ``K`` and ``clients`` as key=value
    lines, then a column line; each following row is
    ``client_id,split,x_0..x_{d-1},label``, grouped by client.
    """
    if not clients:
        raise DataError("refusing to write a dataset with no clients")
    d = clients[0].train.dim
    if n_classes is None:
        n_classes = 1 + max((int(c.split(s).y.max()) for c in clients for s in SPLITS if len(c.split(s))), default=0)
    lines = [
        f"version={FORMAT_VERSION}",
        f"d={d}",
        f"K={n_classes}",
        f"clients={len(clients)}",
        ",".join(["client_id", "split", *(f"x{j}" for j in range(d)), "label"]),
    ]
    for c in sorted(clients, key=lambda c: c.client_id):
        if not any(len(c.split(s)) for s in SPLITS):
            raise DataError(f"client {c.client_id} has no samples and cannot be represented")
        for s in SPLITS:
            ds = c.split(s)
            if ds.dim != d and len(ds):
                raise DataError(f"client {c.client_id} has dimension {ds.dim}, expected {d}")
            prefix = f"{c.client_id},{s},"
            for row, label in zip(ds.x.tolist(), ds.y.tolist()):
                lines.append(prefix + ",".join(map(repr, row)) + f",{label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns (clients, n_classes)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    header = {}
    pos = 0
    for key in ("version", "d", "K", "clients"):
        if pos >= len(lines) or "=" not in lines[pos]:
            raise DataFormatError(f"expected header field {key!r}", pos + 1)
        k, _, v = lines[pos].partition("=")
        if k.strip() != key:
            raise DataFormatError(f"expected header field {key!r}, found {k.strip()!r}", pos + 1)
        try:
            header[key] = int(v)
        except ValueError:
            raise DataFormatError(f"header field {key!r} is not an integer", pos + 1) from None
        pos += 1
    if header["version"] != FORMAT_VERSION:
        raise DataFormatError(f"unknown dataset version {header['version']}", 1)
    d, k_classes, n_clients = header["d"], header["K"], header["clients"]
    if d < 1 or k_classes < 1:
        raise DataFormatError("d and K must be >= 1", 2)
    if n_clients < 1:
        raise DataError("dataset declares no clients")
    if pos >= len(lines) or not lines[pos].startswith("client_id,split"):
        raise DataFormatError("missing column header", pos + 1)
    pos += 1

    rows = {}
    width = d + 3
    for lineno in range(pos + 1, len(lines) + 1):
        parts = lines[lineno - 1].split(",")
        if len(parts) != width:
            raise DataFormatError(f"expected {width} fields (d={d}), found {len(parts)}", lineno)
        try:
            cid = int(parts[0])
            feats = [float(v) for v in parts[2:-1]]
            label = int(parts[-1])
        except ValueError as exc:
            raise DataFormatError(f"unparsable value ({exc})", lineno) from None
        split = parts[1]
        if split not in SPLITS:
            raise DataFormatError(f"unknown split tag {split!r}", lineno)
        if not 0 <= label < k_classes:
            raise DataFormatError(f"label {label} outside [0, {k_classes})", lineno)
        bucket = rows.setdefault(cid, {s: ([], []) for s in SPLITS})[split]
        bucket[0].append(feats)
        bucket[1].append(label)
    if len(rows) != n_clients:
        raise DataFormatError(f"header declares {n_clients} clients but {len(rows)} present", 4)
    clients = []
    for cid in sorted(rows):
        parts = {
            s: LabeledDataset(np.array(xs, dtype=np.float64).reshape(-1, d), np.array(ys, dtype=np.int64), cid, s)
            for s, (xs, ys) in rows[cid].items()
        }
        clients.append(ClientData(cid, parts["train"], parts["val"], parts["test"]))
    return clients, k_classes


def write_truth(path, truth):
    Path(path).write_text(json.dumps(truth.to_json()) + "\n", encoding="utf-8")


def read_truth(path):
    return PlantedTruth.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def spec_dict(spec):
    return asdict(spec)
