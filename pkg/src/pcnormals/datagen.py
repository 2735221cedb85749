"""Synthetic clean/noisy shape pairs with analytic ground-truth normals.

Shapes are sampled uniformly by surface area; noise is isotropic Gaussian
with sigma expressed as a fraction of the clean cloud's bounding-box
diagonal; density variants thin the cloud in bands or along a linear ramp.
A noisy cloud keeps the clean normals as (possibly corrupt) annotations and
stays row-aligned with its clean source, though downstream confidence
estimation re-associates by nearest neighbor and must not rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud, load_normals, load_xyz, save_normals, save_xyz
from .errors import DegenerateInputError, ParameterError, ParseError

SHAPE_KINDS = ("sphere", "torus", "saddle")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}")
        if self.n_points < 100:
            raise ParameterError(f"need at least 100 points, got {self.n_points}")
        for key, value in self.params.items():
            if key in ("radius", "major", "minor", "extent") and value <= 0:
                raise ParameterError(f"shape parameter {key} must be positive, got {value}")


def _sphere(spec: ShapeSpec, rng: np.random.Generator):
    radius = spec.params.get("radius", 1.0)
    v = rng.standard_normal((spec.n_points, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return radius * v, v.copy()


def _torus(spec: ShapeSpec, rng: np.random.Generator):
    major = spec.params.get("major", 1.0)
    minor = spec.params.get("minor", 0.4)
    if minor >= major:
        raise ParameterError(f"torus minor radius {minor} must be below major {major}")
    n = spec.n_points
    theta = np.empty(0)
    phi = np.empty(0)
    # area element is proportional to (major + minor*cos(phi)); rejection-sample phi
    while phi.size < n:
        cand_theta = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        cand_phi = rng.uniform(0.0, 2.0 * np.pi, size=2 * n)
        accept = rng.random(2 * n) < (major + minor * np.cos(cand_phi)) / (major + minor)
        theta = np.concatenate([theta, cand_theta[accept]])
        phi = np.concatenate([phi, cand_phi[accept]])
    theta, phi = theta[:n], phi[:n]
    ring = major + minor * np.cos(phi)
    pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)
    normals = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=1)
    return pts, normals


def _saddle(spec: ShapeSpec, rng: np.random.Generator):
    extent = spec.params.get("extent", 1.0)
    k1 = spec.params.get("kappa1", 1.0)
    k2 = spec.params.get("kappa2", -1.0)
    n = spec.n_points
    gmax = np.sqrt(1.0 + (abs(k1) * extent) ** 2 + (abs(k2) * extent) ** 2)
    xs = np.empty(0)
    ys = np.empty(0)
    while xs.size < n:
        cx = rng.uniform(-extent, extent, size=2 * n)
        cy = rng.uniform(-extent, extent, size=2 * n)
        density = np.sqrt(1.0 + (k1 * cx) ** 2 + (k2 * cy) ** 2)
        accept = rng.random(2 * n) < density / gmax
        xs = np.concatenate([xs, cx[accept]])
        ys = np.concatenate([ys, cy[accept]])
    xs, ys = xs[:n], ys[:n]
    zs = 0.5 * (k1 * xs**2 + k2 * ys**2)
    pts = np.stack([xs, ys, zs], axis=1)
    normals = np.stack([-k1 * xs, -k2 * ys, np.ones(n)], axis=1)
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return pts, normals


def gen_shape(spec: ShapeSpec) -> PointCloud:
    """Clean cloud with unit analytic normals, uniform-area sampled."""
    rng = np.random.default_rng(spec.seed)
    sampler = {"sphere": _sphere, "torus": _torus, "saddle": _saddle}[spec.kind]
    pts, normals = sampler(spec, rng)
    return PointCloud(pts, normals=normals)


def add_noise(clean: PointCloud, level: float, seed: int) -> PointCloud:
    """Row-aligned noisy copy; per-coordinate Gaussian with sigma = level * scale."""
    if level < 0:
        raise ParameterError(f"noise level must be non-negative, got {level}")
    if level == 0:
        return PointCloud(clean.points.copy(), normals=clean.normals)
    rng = np.random.default_rng(seed)
    sigma = level * clean.scale_s
    pts = clean.points + sigma * rng.standard_normal(clean.points.shape)
    return PointCloud(pts, normals=clean.normals)


def _first_principal_axis(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / points.shape[0]
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]
    pivot = np.argmax(np.abs(axis))
    return axis if axis[pivot] >= 0 else -axis


def density_variant(
    cloud: PointCloud,
    mode: str,
    seed: int,
    *,
    striped_probs: tuple[float, float] = (1.0, 0.1),
) -> PointCloud:
    """Subsample along the first principal axis.

    striped: keep probability alternates between `striped_probs` in bands of
    width scale/10; gradient: keep probability ramps linearly from 1.0 down
    to 0.05.
    """
    if mode not in ("striped", "gradient"):
        raise ParameterError(f"unknown density mode {mode!r}")
    rng = np.random.default_rng(seed)
    axis = _first_principal_axis(cloud.points)
    t = cloud.points @ axis
    if mode == "striped":
        band = np.floor((t - t.min()) / (cloud.scale_s / 10.0)).astype(int)
        keep_p = np.where(band % 2 == 0, striped_probs[0], striped_probs[1])
    else:
        span = t.max() - t.min()
        if span <= 0:
            raise DegenerateInputError("cloud has no extent along its principal axis")
        u = (t - t.min()) / span
        keep_p = 1.0 + u * (0.05 - 1.0)
    keep = rng.random(cloud.n) < keep_p
    if not keep.any():
        raise DegenerateInputError("density subsampling removed every point")
    return cloud.subset(np.flatnonzero(keep))


def rotate_labels(cloud: PointCloud, fraction: float, seed: int) -> tuple[PointCloud, np.ndarray]:
    """Corrupt a fraction of annotated normals by a 90-degree rotation.

    Each selected normal is rotated about a random perpendicular axis, so the
    corrupted label is exactly orthogonal to the original. Returns the new
    cloud and the boolean corruption mask.
    """
    if cloud.normals is None:
        raise ParameterError("cloud carries no normals to corrupt")
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    n_corrupt = int(round(fraction * cloud.n))
    chosen = rng.choice(cloud.n, size=n_corrupt, replace=False)
    normals = cloud.normals.copy()
    psi = rng.uniform(0.0, 2.0 * np.pi, size=n_corrupt)
    for ang, idx in zip(psi, chosen):
        n = normals[idx]
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        axis = np.cos(ang) * e1 + np.sin(ang) * e2
        normals[idx] = np.cross(axis, n)
    mask = np.zeros(cloud.n, dtype=bool)
    mask[chosen] = True
    out = PointCloud(cloud.points.copy(), normals=normals)
    return out, mask


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    kind: str
    noise: float
    seed: int
    xyz: str
    normals: str
    clean_xyz: str
    clean_normals: str

    def load_noisy(self, root: Path) -> PointCloud:
        cloud = load_xyz(root / self.xyz)
        cloud.normals = load_normals(root / self.normals, expected_count=cloud.n)
        return cloud

    def load_clean(self, root: Path) -> PointCloud:
        cloud = load_xyz(root / self.clean_xyz)
        cloud.normals = load_normals(root / self.clean_normals, expected_count=cloud.n)
        return cloud


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write("# pcnormals dataset manifest v1\n")
        for e in entries:
            fh.write(
                f"name={e.name} kind={e.kind} noise={e.noise:.17g} seed={e.seed} "
                f"xyz={e.xyz} normals={e.normals} "
                f"clean_xyz={e.clean_xyz} clean_normals={e.clean_normals}\n"
            )


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                fields = dict(tok.split("=", 1) for tok in line.split())
                entries.append(
                    ManifestEntry(
                        name=fields["name"],
                        kind=fields["kind"],
                        noise=float(fields["noise"]),
                        seed=int(fields["seed"]),
                        xyz=fields["xyz"],
                        normals=fields["normals"],
                        clean_xyz=fields["clean_xyz"],
                        clean_normals=fields["clean_normals"],
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ParseError(f"bad manifest entry: {exc}", line=lineno)
    return entries


def generate_dataset(
    out_dir,
    shapes=SHAPE_KINDS,
    n_points: int = 3000,
    noise_levels=(0.0, 0.006),
    seed: int = 0,
    density_modes=(),
) -> list[ManifestEntry]:
    """Write clean/noisy pairs (plus optional density variants) and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for shape_i, kind in enumerate(shapes):
        clean = gen_shape(ShapeSpec(kind=kind, n_points=n_points, seed=seed + shape_i))
        clean_xyz = f"{kind}_clean.xyz"
        clean_normals = f"{kind}_clean.normals"
        save_xyz(out_dir / clean_xyz, clean)
        save_normals(out_dir / clean_normals, clean.normals)
        for level in noise_levels:
            noise_seed = seed + 1000 * shape_i + int(round(level * 1e6))
            noisy = add_noise(clean, level, noise_seed)
            tag = f"{kind}_n{level:g}"
            save_xyz(out_dir / f"{tag}.xyz", noisy)
            save_normals(out_dir / f"{tag}.normals", noisy.normals)
            entries.append(
                ManifestEntry(
                    name=tag,
                    kind=kind,
                    noise=level,
                    seed=noise_seed,
                    xyz=f"{tag}.xyz",
                    normals=f"{tag}.normals",
                    clean_xyz=clean_xyz,
                    clean_normals=clean_normals,
                )
            )
        for mode in density_modes:
            variant = density_variant(clean, mode, seed + 7 * shape_i)
            tag = f"{kind}_{mode}"
            save_xyz(out_dir / f"{tag}.xyz", variant)
            save_normals(out_dir / f"{tag}.normals", variant.normals)
            entries.append(
                ManifestEntry(
                    name=tag,
                    kind=kind,
                    noise=0.0,
                    seed=seed + 7 * shape_i,
                    xyz=f"{tag}.xyz",
                    normals=f"{tag}.normals",
                    clean_xyz=clean_xyz,
                    clean_normals=clean_normals,
                )
            )
    write_manifest(out_dir / "manifest.txt", entries)
    return entries
