"""Neural SDF and colour networks on top of the reverse-mode tape."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1
INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class MlpConfig:
    sdf_hidden_layers: int = 4
    hidden_width: int = 64
    skip_at: int = 2
    softplus_beta: float = 100.0
    color_hidden_layers: int = 2
    pe_freqs_position: int = 6
    pe_freqs_view: int = 4
    feature_dim: int = 64
    init_radius: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        counts = (self.sdf_hidden_layers, self.hidden_width, self.color_hidden_layers,
                  self.feature_dim)
        if min(counts) < 1:
            raise ValueError("layer counts and widths must be >= 1")
        if self.pe_freqs_position < 0 or self.pe_freqs_view < 0:
            raise ValueError("frequency counts must be >= 0")
        if not 0 < self.skip_at < self.sdf_hidden_layers:
            raise ValueError("skip_at must lie strictly inside the hidden stack")
        if self.hidden_width <= self.position_dim:
            raise ValueError("hidden_width must exceed the encoded position size")

    @property
    def position_dim(self) -> int:
        return 3 * (1 + 2 * self.pe_freqs_position)

    @property
    def view_dim(self) -> int:
        return 3 * (1 + 2 * self.pe_freqs_view)


PRESETS = {
    "desk": MlpConfig(),
    "paper": MlpConfig(sdf_hidden_layers=8, hidden_width=256, skip_at=4,
                       color_hidden_layers=4, feature_dim=256),
}


def positional_encode(x, n_freqs: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(n-1) pi x), cos(2^(n-1) pi x)]."""
    x = np.asarray(x)
    parts = [x]
    for k in range(n_freqs):
        a = (2.0 ** k * math.pi) * x
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    return np.concatenate(parts, axis=-1)


def positional_encode_slope(x, n_freqs: int) -> np.ndarray:
    """d(encoding)/d(source component), in the same layout as the encoding."""
    x = np.asarray(x)
    parts = [np.ones_like(x)]
    for k in range(n_freqs):
        w = 2.0 ** k * math.pi
        a = w * x
        parts.append(w * np.cos(a))
        parts.append(-w * np.sin(a))
    return np.concatenate(parts, axis=-1)


def _softplus(z, beta):
    bz = beta * z
    az = np.abs(bz)
    return (0.5 * (bz + az) + np.log1p(np.exp(-np.minimum(az, ad.SOFTPLUS_TAIL)))) / beta, bz


def _softplus_slope(z, bz):
    return 0.5 + 0.5 * np.tanh(0.5 * bz)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


class NeuralSdf:
    """SDF + colour MLPs and the trainable inverse standard deviation.

    The networks see coordinates divided by ``scale`` (the bounding radius),
    and the SDF output is multiplied back by it, so the field is in world
    units while the networks work inside the unit sphere.  ``s`` is stored as
    ``raw_s`` with ``s = exp(raw_s)``.
    """

    def __init__(self, config: MlpConfig, params: dict[str, np.ndarray], scale: float = 1.0):
        self.config = config
        self.params = params
        self.scale = float(scale)

    # --- structure -------------------------------------------------------

    @property
    def bounding_radius(self) -> float:
        return self.scale

    @property
    def s(self) -> float:
        return float(np.exp(self.params["raw_s"]))

    @property
    def n_sdf_layers(self) -> int:
        return self.config.sdf_hidden_layers + 1

    @property
    def n_color_layers(self) -> int:
        return self.config.color_hidden_layers + 1

    def names(self) -> list[str]:
        return list(self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.params.values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec)
        i = 0
        for k, v in self.params.items():
            n = np.size(v)
            self.params[k] = vec[i:i + n].reshape(np.shape(v)).astype(v.dtype)
            i += n

    def copy(self) -> "NeuralSdf":
        return NeuralSdf(self.config, {k: v.copy() for k, v in self.params.items()}, self.scale)

    # --- numpy fast path (no tape) ------------------------------------------

    def _forward_np(self, points, want_grad: bool):
        cfg = self.config
        dt = np.dtype(cfg.dtype)
        x = (np.asarray(points, dtype=np.float64) / self.scale).astype(dt).reshape(-1, 3)
        enc = positional_encode(x, cfg.pe_freqs_position)
        h, slopes = self._hidden_np(enc, want_grad)
        last = self.n_sdf_layers - 1
        z = h @ self.params[f"sdf.{last}.w"] + self.params[f"sdf.{last}.b"]
        f = z[:, 0] * self.scale
        feat = z[:, 1:]
        if not want_grad:
            return f, feat, None
        g = np.broadcast_to(self.params[f"sdf.{self.n_sdf_layers - 1}.w"][:, 0],
                            (x.shape[0], cfg.hidden_width))
        g_enc_skip = None
        for l in range(self.n_sdf_layers - 2, -1, -1):
            gz = g * slopes[l]
            gin = gz @ self.params[f"sdf.{l}.w"].T
            if l == cfg.skip_at:
                width = gin.shape[1] - enc.shape[1]
                g_enc_skip = gin[:, width:] * INV_SQRT2
                gin = gin[:, :width] * INV_SQRT2
            g = gin
        g_enc = g + g_enc_skip
        slope = positional_encode_slope(x, cfg.pe_freqs_position)
        grad = (g_enc * slope).reshape(-1, 1 + 2 * cfg.pe_freqs_position, 3).sum(axis=1)
        return f, feat, grad

    def _hidden_np(self, enc: np.ndarray, want_slopes: bool):
        """Last hidden activations of the SDF stack (and softplus slopes)."""
        cfg = self.config
        h = enc
        slopes = []
        for l in range(self.n_sdf_layers - 1):
            if l == cfg.skip_at:
                h = np.concatenate([h, enc], axis=-1) * INV_SQRT2
            z = h @ self.params[f"sdf.{l}.w"] + self.params[f"sdf.{l}.b"]
            h, e = _softplus(z, cfg.softplus_beta)
            if want_slopes:
                slopes.append(_softplus_slope(z, e))
        return h, slopes

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        f, _, _ = self._forward_np(p, False)
        return f.astype(np.float64).reshape(p.shape[:-1])

    def gradient(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        _, _, g = self._forward_np(p, True)
        return g.astype(np.float64).reshape(p.shape)

    def sdf_feature_grad(self, points):
        return self._forward_np(points, True)

    def color(self, points, normals, views, features=None) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if features is None:
            _, features, _ = self._forward_np(p, False)
        dt = np.dtype(self.config.dtype)
        h = np.concatenate([
            (p / self.scale).astype(dt),
            positional_encode(np.asarray(views, dtype=dt).reshape(-1, 3), self.config.pe_freqs_view),
            np.asarray(normals, dtype=dt).reshape(-1, 3),
            features,
        ], axis=-1)
        for l in range(self.n_color_layers):
            h = h @ self.params[f"color.{l}.w"] + self.params[f"color.{l}.b"]
            if l < self.n_color_layers - 1:
                h = np.maximum(h, 0.0)
        return _sigmoid(h).astype(np.float64)

    def color_fn(self, points, normals, views):
        """Signature-compatible with ``renderer.render_rays``."""
        return self.color(points, normals, views)

    # --- taped forward -------------------------------------------------------

    def tape_params(self, tape: ad.Tape) -> dict[str, ad.Node]:
        return {k: tape.var(v, name=k) for k, v in self.params.items()}

    def sdf_forward(self, P: dict[str, ad.Node], points, want_grad: bool = False):
        """Taped SDF.  Returns ``(f, feature, grad)`` nodes; ``grad`` is None
        unless requested.

        The input gradient is assembled from taped operations (the backward
        chain of the network written out explicitly), so it can itself be
        differentiated with respect to the parameters.
        """
        cfg = self.config
        tape = P["raw_s"].tape
        dt = np.dtype(cfg.dtype)
        x = (np.asarray(points, dtype=np.float64) / self.scale).astype(dt).reshape(-1, 3)
        enc_v = positional_encode(x, cfg.pe_freqs_position)
        enc = tape.const(enc_v)
        h = enc
        sps = []
        beta = cfg.softplus_beta
        last = self.n_sdf_layers - 1
        for l in range(self.n_sdf_layers):
            if l == cfg.skip_at:
                h = ad.scale(ad.concat([h, enc], axis=-1), INV_SQRT2)
            z = ad.affine(h, P[f"sdf.{l}.w"], P[f"sdf.{l}.b"])
            if l < last:
                h = ad.softplus(z, beta)
                sps.append(h)
        f = ad.scale(z[:, 0], self.scale)
        feat = z[:, 1:]
        if not want_grad:
            return f, feat, None
        g = P[f"sdf.{last}.w"][:, 0]
        g_enc_skip = None
        for l in range(last - 1, -1, -1):
            gz = ad.mul(g, ad.softplus_slope(sps[l], beta))
            gin = matmul_t(gz, P[f"sdf.{l}.w"])
            if l == cfg.skip_at:
                width = gin.value.shape[1] - enc_v.shape[1]
                g_enc_skip = ad.scale(gin[:, width:], INV_SQRT2)
                gin = ad.scale(gin[:, :width], INV_SQRT2)
            g = gin
        g_enc = ad.add(g, g_enc_skip)
        slope = positional_encode_slope(x, cfg.pe_freqs_position)
        k = 1 + 2 * cfg.pe_freqs_position
        grad = ad.sum_(ad.reshape(ad.mul(g_enc, slope), (-1, k, 3)), axis=1)
        return f, feat, grad

    def color_forward(self, P: dict[str, ad.Node], points, views, normals: ad.Node,
                      feature: ad.Node) -> ad.Node:
        cfg = self.config
        tape = P["raw_s"].tape
        dt = np.dtype(cfg.dtype)
        p = (np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.scale).astype(dt)
        v = positional_encode(np.asarray(views, dtype=dt).reshape(-1, 3), cfg.pe_freqs_view)
        h = ad.concat([tape.const(p), tape.const(v), normals, feature], axis=-1)
        for l in range(self.n_color_layers):
            h = ad.affine(h, P[f"color.{l}.w"], P[f"color.{l}.b"])
            if l < self.n_color_layers - 1:
                h = ad.maximum(h, 0.0)
        return ad.sigmoid(h)


def matmul_t(a: ad.Node, w: ad.Node) -> ad.Node:
    """``a @ w.T`` as one node."""
    av, wv = a.value, w.value
    return a.tape._record(av @ wv.T, (a, w), (lambda g: g @ wv, lambda g: g.T @ av))


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------


def geometric_init(config: MlpConfig, rng: np.random.Generator, radius: float | None = None,
                   scale: float = 1.0, initial_s: float = 20.0) -> NeuralSdf:
    """Sphere initialisation: the untrained SDF approximates ``|x| - radius``.

    ``radius`` is in normalised units (inside the unit sphere); it defaults
    to ``config.init_radius``.
    """
    radius = config.init_radius if radius is None else float(radius)
    if not radius > 0:
        raise ValueError("radius must be positive")
    dt = np.dtype(config.dtype)
    d_in = config.position_dim
    width = config.hidden_width
    n_layers = config.sdf_hidden_layers + 1
    dims = [d_in] + [width] * config.sdf_hidden_layers + [1 + config.feature_dim]
    params: dict[str, np.ndarray] = {}
    for l in range(n_layers):
        fan_in = dims[l]
        out_dim = dims[l + 1] - (d_in if l + 1 == config.skip_at else 0)
        if l == n_layers - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(dims[l]), 1e-4, size=(fan_in, out_dim))
            b = np.full(out_dim, -radius)
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(out_dim), size=(fan_in, out_dim))
            b = np.zeros(out_dim)
            if l == 0:
                w[3:, :] = 0.0
            if l == config.skip_at:
                w[fan_in - d_in + 3:, :] = 0.0
        params[f"sdf.{l}.w"] = w.astype(dt)
        params[f"sdf.{l}.b"] = b.astype(dt)
    c_in = 3 + config.view_dim + 3 + config.feature_dim
    cdims = [c_in] + [width] * config.color_hidden_layers + [3]
    for l in range(config.color_hidden_layers + 1):
        bound = 1.0 / math.sqrt(cdims[l])
        params[f"color.{l}.w"] = rng.uniform(-bound, bound, (cdims[l], cdims[l + 1])).astype(dt)
        params[f"color.{l}.b"] = rng.uniform(-bound, bound, cdims[l + 1]).astype(dt)
    params["raw_s"] = np.asarray(math.log(initial_s), dtype=dt)
    net = NeuralSdf(config, params, 1.0)
    _calibrate_output(net, rng, radius)
    net.scale = float(scale)
    return net


def _calibrate_output(net: NeuralSdf, rng: np.random.Generator, radius: float,
                      n: int = 4096, ridge: float = 1e-6) -> None:
    """Refit the SDF output column to |x| - radius by ridge least squares.

    The sphere scheme sets the output layer from an infinite-width argument;
    at desk widths the random hidden features leave the realised field far
    from a sphere (sign errors near the origin, tilted gradients).  Fitting
    the output weights on points inside the unit ball keeps the hidden
    layers as initialised and makes the network function match the target.
    """
    x = rng.normal(size=(n, 3))
    x *= (rng.uniform(size=(n, 1)) ** (1.0 / 3.0)) / np.linalg.norm(x, axis=1, keepdims=True)
    enc = positional_encode(x.astype(net.config.dtype), net.config.pe_freqs_position)
    h, _ = net._hidden_np(enc, False)
    a = np.concatenate([h.astype(np.float64), np.ones((n, 1))], axis=1)
    y = np.linalg.norm(x, axis=1) - radius
    sol = np.linalg.solve(a.T @ a + ridge * n * np.eye(a.shape[1]), a.T @ y)
    last = net.n_sdf_layers - 1
    net.params[f"sdf.{last}.w"][:, 0] = sol[:-1]
    net.params[f"sdf.{last}.b"][0] = sol[-1]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, net: NeuralSdf, iteration: int = 0, moments=None,
                    extra: dict | None = None) -> None:
    """Write an ``.npz`` container.

    Layout: ``param/<name>`` arrays, optional ``m/<name>`` and ``v/<name>``
    Adam moments, and ``meta`` (a JSON string with version, config, scale,
    iteration and any extra fields).
    """
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    if moments is not None:
        m, v = moments
        arrays.update({f"m/{k}": a for k, a in m.items()})
        arrays.update({f"v/{k}": a for k, a in v.items()})
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(net.config), "scale": net.scale,
            "iteration": int(iteration), "param_order": list(net.params)}
    if extra:
        meta["extra"] = extra
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(net, iteration, moments_or_None, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        order = meta["param_order"]
        params = {k: z[f"param/{k}"].copy() for k in order}
        moments = None
        if f"m/{order[0]}" in z:
            moments = ({k: z[f"m/{k}"].copy() for k in order},
                       {k: z[f"v/{k}"].copy() for k in order})
    config = MlpConfig(**meta["config"])
    return NeuralSdf(config, params, meta["scale"]), meta["iteration"], moments, meta


def with_dtype(config: MlpConfig, dtype: str) -> MlpConfig:
    return replace(config, dtype=dtype)
