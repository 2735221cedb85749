"""Two-branch normal regression network at desk scale.

The local branch encodes a k-grouped neighborhood of each patch point and is
modulated by Gaussian distance weights; the global branch encodes the
probability-sampled context into a single code that is repeated and
concatenated onto the local features. A quaternion spatial transformer
estimated from the local patch rotates both inputs into a shared canonical
frame. Heads on the M query-nearest points emit per-point normal votes,
per-point normals, sigmoid point weights, and attention scores; the center
normal is the normalized attention-weighted vote sum.

Conventions: points transform into the canonical frame as rows via p @ R.T,
so a predicted normal returns to world coordinates as A.T @ R.T @ n with A
the patch alignment rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import FLOAT_FMT, KdIndex, PointCloud
from .errors import ParameterError, ParseError, ShapeError, SizeError
from .sampling import GlobalSet, Patch, sample_global, sample_local_patch

DIST_WEIGHT_SIGMA = 1.0 / 3.0

# encoder/fusion widths per preset: (qstn_h1, qstn_h2, qstn_h3), (enc_h1, enc_h2), (fus_h1, fus_h2)
WIDTH_PRESETS = {
    "desk": ((32, 64, 32), (64, 128), (128, 64)),
    "mini": ((16, 32, 16), (24, 48), (48, 24)),
    "micro": ((8, 16, 8), (8, 16), (16, 8)),
}

CHECKPOINT_MAGIC = "pcnormals-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    r: int = 64
    r_prime: int = 128
    k_group: int = 16
    m_weight: int = 32
    widths: str = "desk"
    seed: int = 0

    def __post_init__(self):
        if self.widths not in WIDTH_PRESETS:
            raise ParameterError(f"unknown width preset {self.widths!r}")
        if self.r < 1 or self.r_prime < 1:
            raise ParameterError("patch and global sizes must be positive")
        if self.m_weight > self.r:
            raise ParameterError(f"m_weight={self.m_weight} exceeds patch size r={self.r}")
        if self.k_group > self.r:
            raise ParameterError(f"k_group={self.k_group} exceeds patch size r={self.r}")

    def width_table(self):
        return WIDTH_PRESETS[self.widths]


@dataclass
class ModelOutput:
    """Forward result: numpy views plus graph handles for loss construction."""

    n_pred: np.ndarray
    neighbor_normals: np.ndarray
    point_weights: np.ndarray
    rot_R: np.ndarray
    m_indices: np.ndarray
    n_pred_t: Tensor = field(repr=False, default=None)
    neighbor_t: Tensor = field(repr=False, default=None)
    weights_t: Tensor = field(repr=False, default=None)
    rot_t: Tensor = field(repr=False, default=None)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Fresh parameter set; the QSTN head starts at the identity rotation."""
    rng = np.random.default_rng(config.seed)
    (q1, q2, q3), (e1, e2), (f1, f2) = config.width_table()
    spec = {
        "qstn.point1": (3, q1),
        "qstn.point2": (q1, q2),
        "qstn.fc1": (q2, q3),
        "qstn.fc2": (q3, 4),
        "local.enc1": (3, e1),
        "local.enc2": (e1, e2),
        "global.enc1": (3, e1),
        "global.enc2": (e1, e2),
        "fusion.fc1": (2 * e2, f1),
        "fusion.fc2": (f1, f2),
        "head.center": (f2, 3),
        "head.neighbor": (f2, 3),
        "head.weight": (f2, 1),
        "head.attention": (f2, 1),
    }
    params: dict[str, Tensor] = {}
    for name, (fan_in, fan_out) in spec.items():
        params[f"{name}.W"] = Tensor(_linear_init(rng, fan_in, fan_out), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
    params["qstn.fc2.W"] = Tensor(np.zeros((q3, 4)), requires_grad=True)
    params["qstn.fc2.b"] = Tensor(np.array([1.0, 0.0, 0.0, 0.0]), requires_grad=True)
    # normal heads start near +z (the aligned-patch normal direction), which
    # also keeps the vote-sum normalization well away from its singularity
    params["head.center.b"] = Tensor(np.array([0.0, 0.0, 1.0]), requires_grad=True)
    params["head.neighbor.b"] = Tensor(np.array([0.0, 0.0, 1.0]), requires_grad=True)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.zero_grad()


def _dense(x: Tensor, params, name: str, activate: bool = True) -> Tensor:
    out = ad.add(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])
    return ad.relu(out) if activate else out


def qstn(points_t: Tensor, params) -> Tensor:
    """Canonicalizing rotation from the local patch (per-point MLP, max pool,
    quaternion head)."""
    if points_t.values.ndim != 2 or points_t.shape[1] != 3:
        raise ShapeError(f"qstn expects (r, 3) points, got {points_t.shape}")
    if points_t.shape[0] < 4:
        raise ShapeError("qstn needs at least 4 points")
    h = _dense(points_t, params, "qstn.point1")
    h = _dense(h, params, "qstn.point2")
    pooled = ad.max_pool_rows(h)
    h = _dense(ad.reshape(pooled, (1, pooled.size)), params, "qstn.fc1")
    quat = _dense(h, params, "qstn.fc2", activate=False)
    return ad.quat_to_rot(ad.reshape(quat, (4,)))


def _group_indices(points: np.ndarray, k: int) -> np.ndarray:
    """k nearest patch points per patch point (self included, ties by index)."""
    diff = points[:, None, :] - points[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def forward(
    patch: Patch,
    global_set: GlobalSet,
    params: dict[str, Tensor],
    config: ModelConfig,
    *,
    local_t: Tensor | None = None,
    global_t: Tensor | None = None,
) -> ModelOutput:
    """Run the network on one sample.

    `local_t`/`global_t` substitute the point tensors (already in the patch
    frame) so gradients with respect to the inputs can be checked; by default
    the patch and global points are loaded as constants. The global points
    are brought into the patch frame with the patch's alignment rotation.
    """
    local_np = local_t.values if local_t is not None else patch.local_points
    if local_np.shape != (config.r, 3):
        raise ShapeError(f"patch shape {local_np.shape} does not match config r={config.r}")
    if local_t is None:
        local_t = Tensor(patch.local_points)
    if global_t is None:
        global_t = Tensor(global_set.points @ patch.align_rot_A.T)
    if global_t.shape != (config.r_prime, 3):
        raise ShapeError(
            f"global shape {global_t.shape} does not match config r_prime={config.r_prime}"
        )

    rot_t = qstn(local_t, params)
    rot_inv = ad.transpose(rot_t)
    local_rot = ad.matmul(local_t, rot_inv)
    global_rot = ad.matmul(global_t, rot_inv)

    r, k = config.r, config.k_group
    group_idx = _group_indices(local_np, k)
    ad.record_branch(group_idx)
    centers = np.repeat(np.arange(r), k)
    rel = ad.sub(
        ad.gather_rows(local_rot, group_idx.reshape(-1)),
        ad.gather_rows(local_rot, centers),
    )
    h = _dense(rel, params, "local.enc1")
    h = _dense(h, params, "local.enc2")
    local_feat = ad.group_max_pool(h, r)

    dist_sq = ad.dot_rows(local_rot, local_rot)
    dist_w = ad.exp(ad.scalar_mul(dist_sq, -1.0 / DIST_WEIGHT_SIGMA**2))
    local_feat = ad.mul(local_feat, ad.reshape(dist_w, (r, 1)))

    g = _dense(global_rot, params, "global.enc1")
    g = _dense(g, params, "global.enc2")
    code = ad.max_pool_rows(g)

    fused = ad.concat_cols(local_feat, ad.repeat_row(code, r))
    fused = _dense(fused, params, "fusion.fc1")
    fused = _dense(fused, params, "fusion.fc2")

    m_idx = np.argsort(np.linalg.norm(local_np, axis=1), kind="stable")[: config.m_weight]
    ad.record_branch(m_idx)
    fused_m = ad.gather_rows(fused, m_idx)

    votes = ad.normalize_rows(_dense(fused_m, params, "head.center", activate=False))
    neighbor_t = ad.normalize_rows(_dense(fused_m, params, "head.neighbor", activate=False))
    weights_t = ad.reshape(
        ad.sigmoid(_dense(fused_m, params, "head.weight", activate=False)), (config.m_weight,)
    )
    scores = _dense(fused_m, params, "head.attention", activate=False)
    attention = ad.softmax_rows(ad.transpose(scores))
    n_pred_t = ad.normalize_rows(ad.matmul(attention, votes))

    return ModelOutput(
        n_pred=n_pred_t.values.reshape(3).copy(),
        neighbor_normals=neighbor_t.values.copy(),
        point_weights=weights_t.values.copy(),
        rot_R=rot_t.values.copy(),
        m_indices=m_idx,
        n_pred_t=n_pred_t,
        neighbor_t=neighbor_t,
        weights_t=weights_t,
        rot_t=rot_t,
    )


def to_world_frame(n_pred: np.ndarray, rot_R: np.ndarray, align_rot_A: np.ndarray) -> np.ndarray:
    """Undo the canonical and alignment rotations: n_world = A^T R^T n."""
    n = align_rot_A.T @ (rot_R.T @ np.asarray(n_pred, dtype=float))
    return n / np.linalg.norm(n)


def query_rng(seed: int, query_index: int) -> np.random.Generator:
    """Deterministic per-query stream so samples are independent of order."""
    return np.random.default_rng([seed, query_index])


def infer_normal(
    cloud: PointCloud,
    i: int,
    params: dict[str, Tensor],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    *,
    seed: int = 0,
    index: KdIndex | None = None,
) -> np.ndarray:
    """World-frame (unoriented) normal prediction for query point `i`."""
    if rng is None:
        rng = query_rng(seed, i)
    patch = sample_local_patch(cloud, i, config.r, index=index)
    global_set = sample_global(cloud, i, config.r_prime, rng)
    out = forward(patch, global_set, params, config)
    return to_world_frame(out.n_pred, out.rot_R, patch.align_rot_A)


def infer_cloud(
    cloud: PointCloud,
    params: dict[str, Tensor],
    config: ModelConfig,
    *,
    seed: int = 0,
    queries=None,
    index: KdIndex | None = None,
) -> np.ndarray:
    """Predict normals for `queries` (default: every point) in input order."""
    if index is None:
        index = KdIndex(cloud)
    if queries is None:
        queries = np.arange(cloud.n)
    out = np.zeros((len(queries), 3))
    for row, q in enumerate(np.asarray(queries, dtype=int)):
        out[row] = infer_normal(cloud, int(q), params, config, seed=seed, index=index)
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O (versioned text, bit-exact round trip)


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig) -> None:
    path = Path(path)
    names = list(params)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
        fh.write(
            "config "
            f"r={config.r} r_prime={config.r_prime} k_group={config.k_group} "
            f"m_weight={config.m_weight} widths={config.widths} seed={config.seed}\n"
        )
        fh.write(f"tensors {len(names)}\n")
        for name in names:
            t = params[name]
            dims = " ".join(str(d) for d in t.shape)
            fh.write(f"tensor {name} {len(t.shape)} {dims}\n")
            arr = t.values.reshape(t.shape[0], -1) if t.values.ndim == 2 else t.values.reshape(1, -1)
            for row in arr:
                fh.write(" ".join(FLOAT_FMT % v for v in row))
                fh.write("\n")
        fh.write("end\n")


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    path = Path(path)
    with path.open("r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path} is not a checkpoint file", line=1)
    version = lines[0].split("v")[-1]
    if version != str(CHECKPOINT_VERSION):
        raise ParseError(f"unsupported checkpoint version {version}", line=1)
    if len(lines) < 3 or not lines[1].startswith("config "):
        raise ParseError("checkpoint missing config line", line=2)
    cfg_fields = dict(tok.split("=", 1) for tok in lines[1].split()[1:])
    config = ModelConfig(
        r=int(cfg_fields["r"]),
        r_prime=int(cfg_fields["r_prime"]),
        k_group=int(cfg_fields["k_group"]),
        m_weight=int(cfg_fields["m_weight"]),
        widths=cfg_fields["widths"],
        seed=int(cfg_fields["seed"]),
    )
    if not lines[2].startswith("tensors "):
        raise ParseError("checkpoint missing tensor count", line=3)
    count = int(lines[2].split()[1])
    params: dict[str, Tensor] = {}
    lineno = 3
    for _ in range(count):
        header = lines[lineno].split()
        if header[0] != "tensor":
            raise ParseError("expected tensor header", line=lineno + 1)
        name = header[1]
        ndim = int(header[2])
        shape = tuple(int(d) for d in header[3 : 3 + ndim])
        lineno += 1
        n_rows = shape[0] if ndim == 2 else 1
        rows = []
        for r in range(n_rows):
            rows.append([float(v) for v in lines[lineno + r].split()])
        lineno += n_rows
        arr = np.asarray(rows, dtype=float).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if lineno >= len(lines) or lines[lineno] != "end":
        raise ParseError("checkpoint missing end marker", line=lineno + 1)
    return params, config


def replace_param(params: dict[str, Tensor], name: str, tensor: Tensor) -> dict[str, Tensor]:
    """Copy of the parameter dict with one tensor swapped (for grad checks)."""
    if name not in params:
        raise SizeError(f"unknown parameter {name!r}")
    out = dict(params)
    out[name] = tensor
    return out


def model_config_from_fields(fields: dict) -> ModelConfig:
    return replace(ModelConfig(), **fields)
