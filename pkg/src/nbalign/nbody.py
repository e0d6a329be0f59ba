"""Point-cloud states, rigid motions, and force-field utilities.

A configuration is N bodies with 3-D positions and d_h per-body feature
channels. The diffusion machinery works on the zero-centre-of-mass subspace
of positions, so centring helpers live here alongside the rigid-motion
group actions used by the symmetry tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, EmptySystemError

__all__ = [
    "Configuration", "RigidMotion",
    "project_com", "center_positions", "apply_rigid_motion",
    "rms_force", "clip_force", "random_rotation", "ordered_pairs",
    "save_configuration", "load_configuration", "format_configuration",
    "parse_configuration",
]


def ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed pair indices (dst, src), grouped by destination body.

    Grouping means edge rows reshape cleanly to (n, n-1, ...) for per-body
    aggregation without scatter operations.
    """
    dst = np.repeat(np.arange(n), n - 1)
    src = np.concatenate([np.delete(np.arange(n), i) for i in range(n)]) \
        if n > 1 else np.zeros(0, dtype=np.intp)
    return dst.astype(np.intp), src.astype(np.intp)


@dataclass(frozen=True)
class Configuration:
    """Immutable N-body state: positions (N, 3) and features (N, d_h)."""

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        feat = np.asarray(self.features, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ContractViolation(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] == 0:
            raise EmptySystemError("configuration needs at least one body")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ContractViolation(
                f"features must be (N, d_h) with N={pos.shape[0]}, got {feat.shape}"
            )
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(feat))):
            raise ContractViolation("configuration entries must be finite")
        pos = pos.copy()
        feat = feat.copy()
        pos.flags.writeable = False
        feat.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    @property
    def n_bodies(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def centered(self) -> "Configuration":
        return Configuration(project_com(self.positions), self.features)

    def com_magnitude(self) -> float:
        return float(np.linalg.norm(self.positions.mean(axis=0)))


def center_positions(positions: np.ndarray) -> np.ndarray:
    """Single-pass mean subtraction; fast path for samplers."""
    return positions - positions.mean(axis=0)


def project_com(positions: np.ndarray) -> np.ndarray:
    """Remove the centre of mass, iterating to a floating-point fixed point.

    One subtraction leaves a residual mean of order eps; repeating until the
    array stops changing makes the projection exactly idempotent.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ContractViolation(f"positions must be (N, 3), got {pos.shape}")
    if pos.shape[0] == 0:
        raise EmptySystemError("cannot centre an empty system")
    out = pos.copy()
    for _ in range(4):
        m = out.mean(axis=0)
        if not m.any():
            break
        nxt = out - m
        if np.array_equal(nxt, out):
            break
        out = nxt
    return out


@dataclass(frozen=True)
class RigidMotion:
    """Orthogonal transform (rotations and reflections) plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ContractViolation(f"rotation must be 3x3, got {rot.shape}")
        if tr.shape != (3,):
            raise ContractViolation(f"translation must be a 3-vector, got {tr.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-12:
            raise ContractViolation("rotation matrix is not orthogonal to 1e-12")
        rot = rot.copy()
        tr = tr.copy()
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @staticmethod
    def identity() -> "RigidMotion":
        return RigidMotion(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """self after other: x -> R_self (R_other x + t_other) + t_self."""
        return RigidMotion(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_rigid_motion(cfg: Configuration, motion: RigidMotion) -> Configuration:
    """Act on positions; features are geometric invariants and stay put."""
    new_pos = cfg.positions @ motion.rotation.T + motion.translation
    return Configuration(new_pos, cfg.features)


def random_rotation(rng: np.random.Generator, reflections: bool = True) -> RigidMotion:
    """Haar-ish random orthogonal matrix via QR with sign fixing."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if reflections and rng.random() < 0.5:
        q = q @ np.diag([1.0, 1.0, -1.0])
    elif not reflections and np.linalg.det(q) < 0:
        q = q @ np.diag([1.0, 1.0, -1.0])
    return RigidMotion(q, np.zeros(3))


def rms_force(forces: np.ndarray) -> float:
    """Per-body root-mean-square force magnitude: ||F||_F / sqrt(N)."""
    f = np.asarray(forces, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != 3:
        raise ContractViolation(f"forces must be (N, 3), got {f.shape}")
    if f.shape[0] == 0:
        raise EmptySystemError("no bodies")
    return float(np.sqrt((f * f).sum() / f.shape[0]))


def clip_force(forces: np.ndarray, threshold: float) -> np.ndarray:
    """Rescale any per-body force with magnitude above threshold onto it."""
    if threshold <= 0:
        raise ConfigError("force clip threshold must be positive")
    f = np.asarray(forces, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    scale = np.where(norms > threshold, threshold / np.where(norms > 0, norms, 1.0), 1.0)
    return f * scale


# ---------------------------------------------------------------------------
# Text serialization: header "N d_h", then one record per body.


def format_configuration(cfg: Configuration) -> str:
    lines = [f"{cfg.n_bodies} {cfg.feature_dim}"]
    for i in range(cfg.n_bodies):
        fields = [str(i)]
        fields += [repr(float(v)) for v in cfg.positions[i]]
        fields += [repr(float(v)) for v in cfg.features[i]]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def parse_configuration(text: str) -> Configuration:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ContractViolation("empty configuration record")
    head = lines[0].split()
    if len(head) != 2:
        raise ContractViolation(f"bad header {lines[0]!r}; expected 'N d_h'")
    try:
        n, d_h = int(head[0]), int(head[1])
    except ValueError:
        raise ContractViolation(f"bad header {lines[0]!r}; expected 'N d_h'") from None
    if len(lines) - 1 != n:
        raise ContractViolation(f"expected {n} body records, found {len(lines) - 1}")
    pos = np.zeros((n, 3))
    feat = np.zeros((n, d_h))
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 1 + 3 + d_h:
            raise ContractViolation(f"bad body record {ln!r}")
        try:
            idx = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError:
            raise ContractViolation(f"bad body record {ln!r}") from None
        if not 0 <= idx < n:
            raise ContractViolation(f"body index {idx} out of range")
        pos[idx] = values[:3]
        feat[idx] = values[3:]
    return Configuration(pos, feat)


def save_configuration(cfg: Configuration, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_configuration(cfg))


def load_configuration(path) -> Configuration:
    with open(path) as fh:
        return parse_configuration(fh.read())
