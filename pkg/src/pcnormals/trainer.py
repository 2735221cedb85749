"""Confidence-weighted training: sample construction, Adam, and the loop.

Samples are built once per run (patch + global set + targets + confidence)
and reused across epochs; every random stream derives from the run seed and
the query index so a rerun with the same config is bit-identical.

Confidence modes:
  off           c_i = 1, annotated targets
  surface       c_i from distance to the paired clean cloud
  normal        c_i from annotated-vs-clean normal discrepancy
  corrected_gt  c_i = 1, center target replaced by the nearest clean normal
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .autodiff import Tensor, backward, grad_check
from .cloud import KdIndex, PointCloud
from .confidence import normal_confidence, normal_discrepancy, surface_confidence
from .datagen import ManifestEntry, read_manifest
from .errors import (
    EmptyInputError,
    MissingDataError,
    ParameterError,
    ParseError,
    PcnormalsError,
)
from .model import ModelConfig, forward, init_params, query_rng, save_checkpoint, zero_grads
from .sampling import GlobalSet, Patch, sample_global, sample_local_patch

CONFIDENCE_MODES = ("off", "surface", "normal", "corrected_gt")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0009
    batch: int = 16
    epochs: int = 50
    confidence_mode: str = "off"
    sigma_s: float = 0.05
    sigma_n: float = 0.06
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    queries_per_shape: int = 120
    lambdas: tuple = losses.DEFAULT_LAMBDAS
    flip_invariant_neighbor: bool = True
    delta_squared_in_max: bool = False
    debug_grad_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.batch < 1:
            raise ParameterError(f"batch size must be at least 1, got {self.batch}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be at least 1, got {self.epochs}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ParameterError(f"unknown confidence mode {self.confidence_mode!r}")


_MODEL_KEYS = {"r", "r_prime", "k_group", "m_weight", "widths"}
_INT_KEYS = {"batch", "epochs", "seed", "queries_per_shape", "debug_grad_every", "r", "r_prime", "k_group", "m_weight"}
_FLOAT_KEYS = {"lr", "sigma_s", "sigma_n"}
_BOOL_KEYS = {"flip_invariant_neighbor", "delta_squared_in_max"}


def _coerce(key: str, value: str):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        lowered = value.lower()
        if lowered not in ("true", "false", "0", "1"):
            raise ParameterError(f"boolean flag {key} got {value!r}")
        return lowered in ("true", "1")
    if key == "lambdas":
        parts = tuple(float(v) for v in value.split(","))
        if len(parts) != 5:
            raise ParameterError("lambdas needs 5 comma-separated values")
        return parts
    return value


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply key=value overrides (model keys route into the model config)."""
    train_kwargs = {}
    model_kwargs = {}
    for key, raw in overrides.items():
        value = _coerce(key, raw) if isinstance(raw, str) else raw
        if key in _MODEL_KEYS:
            model_kwargs[key] = value
        elif key == "model_seed":
            model_kwargs["seed"] = int(value)
        elif hasattr(config, key):
            train_kwargs[key] = value
        else:
            raise ParameterError(f"unknown config key {key!r}")
    model = replace(config.model, **model_kwargs) if model_kwargs else config.model
    return replace(config, model=model, **train_kwargs)


def load_train_config(path) -> TrainConfig:
    """Flat key=value file, '#' comments, one key per line."""
    path = Path(path)
    overrides: dict[str, str] = {}
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", line=lineno)
            key, value = line.split("=", 1)
            overrides[key.strip()] = value.strip()
    return apply_overrides(TrainConfig(), overrides)


def save_train_config(path, config: TrainConfig) -> None:
    path = Path(path)
    model = config.model
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write(f"lr={config.lr:.17g}\n")
        fh.write(f"batch={config.batch}\n")
        fh.write(f"epochs={config.epochs}\n")
        fh.write(f"confidence_mode={config.confidence_mode}\n")
        fh.write(f"sigma_s={config.sigma_s:.17g}\n")
        fh.write(f"sigma_n={config.sigma_n:.17g}\n")
        fh.write(f"seed={config.seed}\n")
        fh.write(f"queries_per_shape={config.queries_per_shape}\n")
        fh.write(f"lambdas={','.join('%.17g' % v for v in config.lambdas)}\n")
        fh.write(f"flip_invariant_neighbor={str(config.flip_invariant_neighbor).lower()}\n")
        fh.write(f"delta_squared_in_max={str(config.delta_squared_in_max).lower()}\n")
        fh.write(f"debug_grad_every={config.debug_grad_every}\n")
        fh.write(f"r={model.r}\n")
        fh.write(f"r_prime={model.r_prime}\n")
        fh.write(f"k_group={model.k_group}\n")
        fh.write(f"m_weight={model.m_weight}\n")
        fh.write(f"widths={model.widths}\n")
        fh.write(f"model_seed={model.seed}\n")


# ---------------------------------------------------------------------------
# sample construction


@dataclass(frozen=True)
class Sample:
    shape_name: str
    query_index: int
    patch: Patch
    global_set: GlobalSet
    target: losses.SampleTarget


def _sample_confidence(
    mode: str,
    p: np.ndarray,
    annotated_normal: np.ndarray,
    noisy_scale: float,
    clean: PointCloud | None,
    clean_index: KdIndex | None,
    sigma_s: float,
    sigma_n: float,
) -> tuple[float, np.ndarray]:
    """(c_i, center ground-truth normal in world frame) for one query."""
    if mode == "off":
        return 1.0, annotated_normal
    if clean is None or clean_index is None:
        raise MissingDataError(f"confidence mode {mode!r} needs a paired clean cloud")
    idx, dist = clean_index.nearest(p)
    if mode == "surface":
        return surface_confidence(dist, noisy_scale, sigma_s), annotated_normal
    if mode == "normal":
        if clean.normals is None:
            raise MissingDataError("clean cloud carries no normals")
        d_n = normal_discrepancy(annotated_normal, clean.normals[idx])
        return normal_confidence(d_n, sigma_n), annotated_normal
    if mode == "corrected_gt":
        if clean.normals is None:
            raise MissingDataError("clean cloud carries no normals")
        return 1.0, clean.normals[idx]
    raise ParameterError(f"unknown confidence mode {mode!r}")


def build_cloud_samples(
    noisy: PointCloud,
    clean: PointCloud | None,
    config: TrainConfig,
    *,
    shape_name: str = "",
    entry_seed: int = 0,
    query_indices=None,
) -> list[Sample]:
    """Samples for one (noisy, clean) pair; queries default to a seeded subset."""
    if noisy.normals is None:
        raise MissingDataError("training cloud carries no annotated normals")
    model_cfg = config.model
    index = KdIndex(noisy)
    clean_index = KdIndex(clean) if clean is not None else None
    if query_indices is None:
        count = min(config.queries_per_shape, noisy.n)
        rng = np.random.default_rng([config.seed, entry_seed])
        query_indices = np.sort(rng.choice(noisy.n, size=count, replace=False))
    samples = []
    for qi in np.asarray(query_indices, dtype=int):
        patch = sample_local_patch(noisy, int(qi), model_cfg.r, index=index)
        gset = sample_global(
            noisy, int(qi), model_cfg.r_prime, query_rng(config.seed + entry_seed, int(qi))
        )
        c_i, gt_world = _sample_confidence(
            config.confidence_mode,
            noisy.points[qi],
            noisy.normals[qi],
            noisy.scale_s,
            clean,
            clean_index,
            config.sigma_s,
            config.sigma_n,
        )
        rot = patch.align_rot_A
        m = model_cfg.m_weight
        neighbor_world = noisy.normals[patch.neighbor_indices[:m]]
        target = losses.SampleTarget(
            n_gt=gt_world @ rot.T,
            neighbor_gt=neighbor_world @ rot.T,
            c_i=c_i,
            patch_points_M=patch.local_points[:m],
        )
        samples.append(
            Sample(
                shape_name=shape_name,
                query_index=int(qi),
                patch=patch,
                global_set=gset,
                target=target,
            )
        )
    return samples


def build_samples(
    manifest: list[ManifestEntry] | str | Path,
    config: TrainConfig,
    root: Path | None = None,
) -> list[Sample]:
    """Samples for every manifest entry, in manifest order."""
    if isinstance(manifest, (str, Path)):
        root = Path(manifest).parent if root is None else Path(root)
        manifest = read_manifest(manifest)
    elif root is None:
        root = Path(".")
    samples: list[Sample] = []
    needs_clean = config.confidence_mode != "off"
    for entry_i, entry in enumerate(manifest):
        noisy = entry.load_noisy(root)
        clean = entry.load_clean(root) if needs_clean else None
        samples.extend(
            build_cloud_samples(
                noisy,
                clean,
                config,
                shape_name=entry.name,
                entry_seed=entry_i,
            )
        )
    if not samples:
        raise EmptyInputError("manifest produced no training samples")
    return samples


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        state = cls()
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.values)
            state.v[name] = np.zeros_like(t.values)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction from each tensor's grad."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise PcnormalsError(f"non-finite gradient in parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        t.values = t.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    curve: list[dict]
    checkpoint_path: Path | None


LOG_COLUMNS = ("step", "epoch", "l1", "l2", "l3", "l4", "l5", "total")


def write_train_log(path, rows: list[dict]) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def _batch_pass(batch, params, config):
    """Forward/backward over one batch; returns mean per-term floats."""
    sums = np.zeros(6)
    scale = 1.0 / len(batch)
    for sample in batch:
        out = forward(sample.patch, sample.global_set, params, config.model)
        br = losses.sample_loss(
            out,
            sample.target,
            config.lambdas,
            flip_invariant_neighbor=config.flip_invariant_neighbor,
            delta_squared_in_max=config.delta_squared_in_max,
        )
        sums += br.as_floats()
        backward(br.total * scale)
    return sums * scale


def _debug_grad_probe(sample, params, config) -> float:
    """Finite-difference check of one small parameter tensor on one sample."""
    name = min(params, key=lambda n: params[n].size)

    def f(t: Tensor):
        probe = dict(params)
        probe[name] = t
        out = forward(sample.patch, sample.global_set, probe, config.model)
        return losses.sample_loss(
            out,
            sample.target,
            config.lambdas,
            flip_invariant_neighbor=config.flip_invariant_neighbor,
            delta_squared_in_max=config.delta_squared_in_max,
        ).total

    return grad_check(f, params[name], eps=1e-5)


def train(
    config: TrainConfig,
    samples: list[Sample],
    *,
    out_dir: Path | str | None = None,
    log_hook=None,
) -> TrainResult:
    """Minimize the mean per-sample objective with Adam.

    Writes a rolling checkpoint each epoch and `train_log.csv` when
    `out_dir` is given. Aborts (checkpoint preserved) if the loss goes
    non-finite.
    """
    if not samples:
        raise EmptyInputError("no training samples")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = init_params(config.model)
    state = AdamState.for_params(params)
    shuffle_rng = np.random.default_rng([config.seed, 0xD1CE])
    checkpoint_path = out_dir / "checkpoint.txt" if out_dir is not None else None

    rows: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        for start in range(0, len(order), config.batch):
            batch = [samples[i] for i in order[start : start + config.batch]]
            zero_grads(params)
            means = _batch_pass(batch, params, config)
            row = {k: float(v) for k, v in zip(("l1", "l2", "l3", "l4", "l5", "total"), means)}
            row.update(step=step, epoch=epoch)
            rows.append(row)
            if log_hook is not None:
                log_hook(row)
            if not np.isfinite(means[5]):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, params, config.model)
                    write_train_log(out_dir / "train_log.csv", rows)
                raise PcnormalsError(f"training diverged at step {step} (non-finite loss)")
            if config.debug_grad_every and step % config.debug_grad_every == 0:
                err = _debug_grad_probe(batch[0], params, config)
                if err > 1e-3:
                    raise PcnormalsError(f"gradient probe failed at step {step}: rel err {err:.2e}")
            adam_step(params, state, config.lr)
            step += 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, config.model)
    if out_dir is not None:
        write_train_log(out_dir / "train_log.csv", rows)
    return TrainResult(params=params, curve=rows, checkpoint_path=checkpoint_path)
