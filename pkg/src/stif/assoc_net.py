"""The association network: cue embedding, spatial/temporal attention flow,
affinity head and prediction heads.

All per-frame computations run on *compact* tensors that hold only the valid
detections (n x d). The ``*_flow`` / ``*_modeling`` wrappers accept K-row
padded tensors plus a validity mask, gather the valid rows, and scatter the
results back, so outputs on valid rows never depend on K.

Affinity layout: rows are current-frame objects, columns previous-frame
objects; the last row/column is the un-identified slot. ``Γ[i, m]`` is the
birth logit of current object i, ``Γ[n, j]`` the death logit of previous
object j, ``Γ[n, m]`` is unused (0).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import corners2d, corners3d, to_world

PAD_LOGIT = -1.0e4

CUES = ("both", "appearance", "geometric")


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    d: int = 64
    heads: int = 4
    n_spatial_layers: int = 3
    n_temporal_layers: int = 4
    affinity_layer_index: int = 2
    K: int = 16
    d_reid: int = 32
    n_categories: int = 3
    n_attributes: int = 3
    tau: int = 5
    geo_hidden: int = 64
    ffn_hidden: int = 128
    affinity_hidden: int = 16
    cues: str = "both"
    world_scale: float = 0.2  # 1/m applied to world-frame 3D corners
    image_w: float = 1600.0
    image_h: float = 900.0

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.affinity_layer_index <= self.n_temporal_layers:
            raise ConfigError("affinity_layer_index must be in [1, n_temporal_layers]")
        if self.K < 1 or self.tau < 1:
            raise ConfigError("K and tau must be >= 1")
        if self.cues not in CUES:
            raise ConfigError(f"cues must be one of {CUES}")
        for name in ("n_spatial_layers", "n_temporal_layers", "d_reid", "n_categories",
                     "n_attributes", "geo_hidden", "ffn_hidden", "affinity_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# --- parameter layout ----------------------------------------------------------------

def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes (insertion order is the checkpoint order)."""
    d, hg, hf, ha = cfg.d, cfg.geo_hidden, cfg.ffn_hidden, cfg.affinity_hidden
    s: dict[str, tuple[int, ...]] = {}

    def linear(name, n_in, n_out):
        s[f"{name}.w"] = (n_in, n_out)
        s[f"{name}.b"] = (n_out,)

    for stream, dim in (("p2", 2), ("p3", 3)):
        linear(f"geo.{stream}.0", dim, hg)
        linear(f"geo.{stream}.1", hg, hg)
        linear(f"geo.{stream}.2", hg, hg)
    linear("geo.mix", 2 * hg, d)
    linear("app.reid", cfg.d_reid, d)
    linear("app.cat", cfg.n_categories, d)
    linear("fuse", 2 * d, d)

    def block(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            s[f"{prefix}.attn.{w}"] = (d, d)
        s[f"{prefix}.attn.bo"] = (d,)
        s[f"{prefix}.ln1.g"] = (d,)
        s[f"{prefix}.ln1.b"] = (d,)
        linear(f"{prefix}.ffn.0", d, hf)
        linear(f"{prefix}.ffn.1", hf, d)
        s[f"{prefix}.ln2.g"] = (d,)
        s[f"{prefix}.ln2.b"] = (d,)

    for layer in range(cfg.n_spatial_layers):
        block(f"spatial.{layer}")
    linear("motion.0", d + 1, d)
    linear("motion.1", d, d)
    for layer in range(cfg.n_temporal_layers):
        block(f"temporal.{layer}")
    linear("affinity.0", 1, ha)
    linear("affinity.1", ha, 1)
    s["affinity.birth"] = (1,)
    s["affinity.death"] = (1,)
    for head, n_out in (("velocity", 3), ("attribute", cfg.n_attributes), ("refine", 7)):
        linear(f"heads.{head}.0", d, d)
        linear(f"heads.{head}.1", d, d)
        linear(f"heads.{head}.2", d, n_out)
    return s


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains.

    Final head layers are scaled by 0.1 so refinements start near zero.
    Residual-branch outputs (attention output, second FFN layer, motion FFN
    output) are scaled by 0.1 so every block starts close to the identity.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            val = np.ones(shape)
        elif len(shape) == 2:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            val = rng.uniform(-lim, lim, size=shape)
            if name.startswith("heads.") and name.endswith(".2.w"):
                val *= 0.1
            elif name.endswith((".attn.wo", ".ffn.1.w")) or name == "motion.1.w":
                val *= 0.1
        else:
            val = np.zeros(shape)
        out[name] = Tensor(val, requires_grad=True, name=name)
    return out


def zero_params(cfg: NetConfig) -> dict[str, Tensor]:
    return {name: Tensor(np.zeros(shape), requires_grad=True, name=name)
            for name, shape in param_shapes(cfg).items()}


# --- containers ----------------------------------------------------------------------

@dataclass
class FrameFeatures:
    """Per-frame features of the valid detections (row i = detection i)."""

    fused: Tensor
    spatial: Tensor
    K: int
    timestamp: float

    @property
    def n(self) -> int:
        return self.spatial.shape[0]

    @property
    def valid_mask(self) -> np.ndarray:
        m = np.zeros(self.K, dtype=bool)
        m[: self.n] = True
        return m

    def padded_spatial(self) -> np.ndarray:
        out = np.zeros((self.K, self.spatial.shape[1]))
        out[: self.n] = self.spatial.data
        return out


@dataclass
class AffinityMatrix:
    """Affinity logits Γ between a current and a previous frame.

    ``logits`` is the compact (n+1) x (m+1) tensor; ``row_index`` /
    ``col_index`` give the K-slot of each valid row / column.
    """

    logits: Tensor
    row_index: np.ndarray
    col_index: np.ndarray
    K: int

    @property
    def n(self) -> int:
        return self.logits.shape[0] - 1

    @property
    def m(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def valid_rows(self) -> np.ndarray:
        v = np.zeros(self.K + 1, dtype=bool)
        v[self.row_index] = True
        v[self.K] = True
        return v

    @property
    def valid_cols(self) -> np.ndarray:
        v = np.zeros(self.K + 1, dtype=bool)
        v[self.col_index] = True
        v[self.K] = True
        return v

    def dense(self) -> np.ndarray:
        """(K+1) x (K+1) logits; padded entries hold ``PAD_LOGIT``."""
        K, g = self.K, self.logits.data
        n, m = self.n, self.m
        out = np.full((K + 1, K + 1), PAD_LOGIT)
        out[np.ix_(self.row_index, self.col_index)] = g[:n, :m]
        out[self.row_index, K] = g[:n, m]
        out[K, self.col_index] = g[n, :m]
        out[K, K] = g[n, m]
        return out


def dual_softmax(gamma: Tensor | np.ndarray) -> np.ndarray:
    """Matching probabilities of the real pairs: row-softmax ⊙ column-softmax.

    Row softmax runs over previous objects plus the slot column, column
    softmax over current objects plus the slot row. Returns n x m.
    """
    g = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    n, m = g.shape[0] - 1, g.shape[1] - 1
    fwd = g[:n] - g[:n].max(axis=1, keepdims=True)
    fwd = np.exp(fwd)
    fwd /= fwd.sum(axis=1, keepdims=True)
    bwd = g[:, :m] - g[:, :m].max(axis=0, keepdims=True)
    bwd = np.exp(bwd)
    bwd /= bwd.sum(axis=0, keepdims=True)
    return fwd[:, :m] * bwd[:n, :]


# --- input preparation -------------------------------------------------------------------

def frame_arrays(frame, cfg: NetConfig) -> dict[str, np.ndarray]:
    """Raw network inputs for the detections of a :class:`DetectionFrame`."""
    dets = frame.detections
    n = len(dets)
    c2 = np.zeros((n, 4, 2))
    c3 = np.zeros((n, 8, 3))
    reid = np.zeros((n, cfg.d_reid))
    onehot = np.zeros((n, cfg.n_categories))
    for i, det in enumerate(dets):
        c2[i] = corners2d(det.box2d)
        c3[i] = corners3d(to_world(frame.ego_pose, det.box3d))
        reid[i] = det.appearance
        onehot[i, det.category] = 1.0
    return {"c2": c2, "c3": c3, "reid": reid, "onehot": onehot}


class AssocNet:
    """Network weights plus the forward operations that use them."""

    def __init__(self, config: NetConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config or NetConfig()
        self.config.validate()
        self.params = params if params is not None else init_params(self.config, seed)
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")

    @classmethod
    def zeros(cls, config: NetConfig | None = None) -> "AssocNet":
        config = config or NetConfig()
        return cls(config, zero_params(config))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # --- small building blocks ---
    def _linear(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])

    def _mlp(self, x: Tensor, prefix: str, layers: int, final_relu: bool) -> Tensor:
        for i in range(layers):
            x = self._linear(x, f"{prefix}.{i}")
            if i < layers - 1 or final_relu:
                x = ad.relu(x)
        return x

    def _block(self, x: Tensor, kv: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        p = self.params
        a, logits = ad.multi_head_attention(x, kv, kv, p, self.config.heads, prefix=prefix + ".attn.")
        x = ad.layer_norm(ad.add(x, a), p[prefix + ".ln1.g"], p[prefix + ".ln1.b"])
        f = self._mlp(x, prefix + ".ffn", 2, final_relu=False)
        x = ad.layer_norm(ad.add(x, f), p[prefix + ".ln2.g"], p[prefix + ".ln2.b"])
        return x, logits

    # --- cue embedding ---
    def embed_geometric(self, c2, c3) -> Tensor:
        """Per-point 3-layer perceptron + max-pool over corners, per stream.

        ``c2``: (n, 4, 2) pixel corners, ``c3``: (n, 8, 3) world-frame corners
        (single boxes of shape (4, 2) / (8, 3) are accepted). Returns n x d.
        """
        cfg = self.config
        c2 = np.asarray(c2, dtype=np.float64)
        c3 = np.asarray(c3, dtype=np.float64)
        if c2.ndim == 2:
            c2, c3 = c2[None], c3[None]
        if c2.shape[1:] != (4, 2) or c3.shape[1:] != (8, 3) or c2.shape[0] != c3.shape[0]:
            raise ad.ShapeError(f"corner shapes {c2.shape}, {c3.shape}")
        if not (np.all(np.isfinite(c2)) and np.all(np.isfinite(c3))):
            raise ad.NumericError("non-finite corners")
        n = c2.shape[0]
        half = cfg.image_w / 2.0
        p2 = (c2 - np.array([cfg.image_w / 2.0, cfg.image_h / 2.0])) / half
        p3 = c3 * cfg.world_scale
        h2 = self._mlp(Tensor(p2.reshape(n * 4, 2)), "geo.p2", 3, final_relu=True)
        h3 = self._mlp(Tensor(p3.reshape(n * 8, 3)), "geo.p3", 3, final_relu=True)
        g2 = ad.max_pool(ad.reshape(h2, (n, 4, cfg.geo_hidden)), axis=1)
        g3 = ad.max_pool(ad.reshape(h3, (n, 8, cfg.geo_hidden)), axis=1)
        return self._linear(ad.concat([g2, g3], axis=1), "geo.mix")

    def embed_appearance(self, reid, category_onehot) -> Tensor:
        """Linear map of the Re-ID vector plus a perceptron on the category one-hot."""
        reid = np.atleast_2d(np.asarray(reid, dtype=np.float64))
        onehot = np.atleast_2d(np.asarray(category_onehot, dtype=np.float64))
        if reid.shape[1] != self.config.d_reid or onehot.shape[1] != self.config.n_categories:
            raise ad.ShapeError(f"appearance inputs {reid.shape}, {onehot.shape}")
        return ad.add(self._linear(Tensor(reid), "app.reid"), self._linear(Tensor(onehot), "app.cat"))

    def fuse(self, appearance: Tensor, geometric: Tensor) -> Tensor:
        if appearance.shape != geometric.shape:
            raise ad.ShapeError(f"fuse: {appearance.shape} vs {geometric.shape}")
        cues = self.config.cues
        if cues == "appearance":
            geometric = Tensor(np.zeros(geometric.shape))
        elif cues == "geometric":
            appearance = Tensor(np.zeros(appearance.shape))
        return ad.relu(self._linear(ad.concat([appearance, geometric], axis=1), "fuse"))

    def embed(self, inputs: dict[str, np.ndarray]) -> Tensor:
        """Fused cue embedding (n x d) from :func:`frame_arrays` output."""
        geo = self.embed_geometric(inputs["c2"], inputs["c3"])
        app = self.embed_appearance(inputs["reid"], inputs["onehot"])
        return self.fuse(app, geo)

    # --- spatial flow ---
    def spatial(self, fused: Tensor) -> Tensor:
        """Self-attention blocks over the rows of a compact n x d tensor."""
        if fused.shape[0] < 1:
            raise ValueError("spatial flow needs at least one valid object")
        x = fused
        for layer in range(self.config.n_spatial_layers):
            x, _ = self._block(x, x, f"spatial.{layer}")
        return x

    def spatial_flow(self, fused: Tensor, mask) -> Tensor:
        """K x d padded version of :meth:`spatial`; invalid rows pass through."""
        idx = _valid_index(mask, fused.shape[0])
        out = self.spatial(ad.index(fused, idx))
        return ad.scatter_rows(out, idx, fused)

    # --- motion modeling ---
    def motion(self, spatial_prev: Tensor, dt: float) -> Tensor:
        """Time-aware features: rows concatenated with dt, then a residual FFN."""
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        m = spatial_prev.shape[0]
        x = ad.concat([spatial_prev, Tensor(np.full((m, 1), float(dt)))], axis=1)
        return ad.add(spatial_prev, self._mlp(x, "motion", 2, final_relu=False))

    def motion_modeling(self, spatial_prev: Tensor, dt: float, mask=None) -> Tensor:
        if mask is None:
            return self.motion(spatial_prev, dt)
        idx = _valid_index(mask, spatial_prev.shape[0])
        return ad.scatter_rows(self.motion(ad.index(spatial_prev, idx), dt), idx, spatial_prev)

    # --- temporal flow ---
    def _affinity_ffn(self, s: Tensor) -> Tensor:
        n, m = s.shape
        h = self._mlp(ad.reshape(s, (n * m, 1)), "affinity", 2, final_relu=False)
        return ad.reshape(h, (n, m))

    def temporal(self, cur: Tensor, prev: Tensor) -> tuple[Tensor, Tensor]:
        """Cross-attention from current rows to previous (motion-modeled) rows.

        Returns the aggregated features (n x d) and Γ ((n+1) x (m+1)).
        """
        n, m = cur.shape[0], prev.shape[0]
        if n < 1 or m < 1:
            raise ValueError("temporal flow needs at least one object in each frame")
        p = self.params
        x = cur
        scores = None
        for layer in range(self.config.n_temporal_layers):
            x, logits = self._block(x, prev, f"temporal.{layer}")
            if layer + 1 == self.config.affinity_layer_index:
                scores = ad.mean(logits, axis=0)
        core = self._affinity_ffn(scores)
        birth = ad.add(Tensor(np.zeros((n, 1))), p["affinity.birth"])
        death = ad.add(Tensor(np.zeros((1, m))), p["affinity.death"])
        top = ad.concat([core, birth], axis=1)
        bottom = ad.concat([death, Tensor(np.zeros((1, 1)))], axis=1)
        return x, ad.concat([top, bottom], axis=0)

    def temporal_flow(self, spatial_cur: Tensor, motion_prev: Tensor, cur_mask, prev_mask
                      ) -> tuple[Tensor, AffinityMatrix]:
        K = spatial_cur.shape[0]
        ri = _valid_index(cur_mask, K)
        ci = _valid_index(prev_mask, motion_prev.shape[0])
        agg, gamma = self.temporal(ad.index(spatial_cur, ri), ad.index(motion_prev, ci))
        return ad.scatter_rows(agg, ri, spatial_cur), AffinityMatrix(gamma, ri, ci, K)

    # --- prediction heads ---
    def heads(self, aggregated: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Velocity (n x 3), attribute logits (n x n_attributes), box refinement (n x 7)."""
        if aggregated.ndim != 2 or aggregated.shape[1] != self.config.d:
            raise ad.ShapeError(f"heads: expected n x {self.config.d}, got {aggregated.shape}")
        return tuple(self._mlp(aggregated, f"heads.{h}", 3, final_relu=False)
                     for h in ("velocity", "attribute", "refine"))

    # --- whole frame ---
    def encode_frame(self, frame) -> FrameFeatures:
        """Embed + spatial flow for a :class:`~stif.simulator.DetectionFrame`."""
        if not frame.detections:
            empty = Tensor(np.zeros((0, self.config.d)))
            return FrameFeatures(empty, empty, self.config.K, frame.timestamp)
        fused = self.embed(frame_arrays(frame, self.config))
        return FrameFeatures(fused, self.spatial(fused), self.config.K, frame.timestamp)


def _valid_index(mask, K: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (K,):
        raise ad.ShapeError(f"mask shape {mask.shape}, expected ({K},)")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no valid rows")
    return idx
