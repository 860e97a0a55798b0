"""Training loop with its losses and the Adam warmup-cosine schedule."""

from __future__ import annotations

import csv
import ctypes
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .field import ray_sphere_clip
from .neural import MlpConfig, NeuralSdf, PRESETS, geometric_init, load_checkpoint, save_checkpoint
from .renderer import PHI_FLOOR, hierarchical_sample_batch
from .scenegen import Dataset

MASK_EPS = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_COLUMNS = ("iter", "total", "color", "eikonal", "mask", "lr", "s")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block: str, iteration: int):
        super().__init__(f"non-finite gradient in parameter block {block!r} at iteration {iteration}")
        self.block = block
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 512
    lambda_eikonal: float = 0.1
    beta_mask: float = 0.1
    iterations: int = 10_000
    lr_peak: float = 5e-4
    lr_min: float = 2.5e-5
    warmup_iters: int = 500
    seed: int = 0
    use_mask: bool = True
    n_coarse: int = 64
    n_importance: int = 16
    upsample_rounds: int = 4
    initial_s: float = 20.0
    # learning-rate multiplier for log s; with Adam this equals storing log s / 10
    s_lr_scale: float = 10.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        positive = ("batch_rays", "iterations", "lr_peak", "lr_min", "warmup_iters",
                    "n_coarse", "initial_s", "s_lr_scale", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_eikonal < 0 or self.beta_mask < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_importance < 0 or self.upsample_rounds < 0:
            raise ValueError("importance sample counts must be non-negative")
        if not self.warmup_iters < self.iterations:
            raise ValueError("warmup_iters must be smaller than iterations")
        if self.lr_min > self.lr_peak:
            raise ValueError("lr_min must not exceed lr_peak")

    @property
    def samples_per_ray(self) -> int:
        """Mid-points per ray, which is also the Eikonal sample count per ray."""
        return self.n_coarse + self.upsample_rounds * self.n_importance


# Desk-scale training settings sized for a single CPU core.
TRAIN_PRESETS = {
    "desk": TrainConfig(batch_rays=128, n_coarse=32, n_importance=8, upsample_rounds=4),
    "paper": TrainConfig(batch_rays=512, warmup_iters=5000, iterations=300_000),
}


# --------------------------------------------------------------------------
# losses; each accepts tape nodes (returning a node) or plain arrays
# --------------------------------------------------------------------------


def color_loss(outputs, targets):
    """Mean over rays of the per-channel mean absolute difference."""
    if isinstance(outputs, Node):
        return ad.mean(ad.abs_(ad.sub(outputs, np.asarray(targets))))
    outputs, targets = np.asarray(outputs, float), np.asarray(targets, float)
    if outputs.shape != targets.shape:
        raise ValueError("outputs and targets must have equal shapes")
    return float(np.mean(np.abs(outputs - targets)))


def eikonal_from_gradients(grads):
    """Mean of (|g| - 1)^2 over the leading axis."""
    if isinstance(grads, Node):
        return ad.mean(ad.square(ad.sub(ad.norm(grads, axis=-1), 1.0)))
    g = np.asarray(grads, float)
    return float(np.mean((np.linalg.norm(g, axis=-1) - 1.0) ** 2))


def eikonal_loss(net, sampled_points) -> float:
    return eikonal_from_gradients(net.gradient(np.asarray(sampled_points, float).reshape(-1, 3)))


def mask_loss(opacities, masks, eps: float = MASK_EPS):
    """Binary cross entropy of the masks against opacities clamped to [eps, 1 - eps]."""
    if isinstance(opacities, Node):
        m = np.asarray(masks, dtype=opacities.value.dtype)
        o = ad.clip(opacities, eps, 1.0 - eps)
        one_minus = ad.sub(1.0, o)
        ll = ad.add(ad.mul(ad.log(o), m), ad.mul(ad.log(one_minus), 1.0 - m))
        return ad.neg(ad.mean(ll))
    o = np.clip(np.asarray(opacities, float), eps, 1.0 - eps)
    m = np.asarray(masks, float)
    return float(-np.mean(m * np.log(o) + (1.0 - m) * np.log1p(-o)))


def total_loss(color, eikonal, mask=None, lambda_eikonal: float = 0.1, beta_mask: float = 0.1):
    """color + lambda * eikonal (+ beta * mask when a mask term is supplied)."""
    if any(isinstance(x, Node) for x in (color, eikonal, mask)):
        out = ad.add(color, ad.scale(eikonal, lambda_eikonal))
        if mask is not None:
            out = ad.add(out, ad.scale(mask, beta_mask))
        return out
    out = color + lambda_eikonal * eikonal
    if mask is not None:
        out += beta_mask * mask
    return out


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


def learning_rate(iteration: int, config: TrainConfig) -> float:
    if iteration < config.warmup_iters:
        return config.lr_peak * iteration / config.warmup_iters
    progress = (iteration - config.warmup_iters) / (config.iterations - config.warmup_iters)
    progress = min(max(progress, 0.0), 1.0)
    return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              iteration: int, lr: float, lr_scale: dict[str, float] | None = None) -> None:
    """One in-place Adam update; ``iteration`` is zero-based."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(k, iteration)
    t = iteration + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        step = lr * (lr_scale or {}).get(k, 1.0)
        update = (step * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
        if p.ndim == 0:
            params[k] = np.asarray(p - update, dtype=p.dtype)
        else:
            p -= update


# --------------------------------------------------------------------------
# batches and differentiable rendering
# --------------------------------------------------------------------------


@dataclass
class RayBatch:
    colors: np.ndarray  # (m, 3) in [0, 1]
    origins: np.ndarray  # (m, 3)
    directions: np.ndarray  # (m, 3) unit
    masks: np.ndarray | None = None  # (m,) in {0, 1}

    def __post_init__(self):
        m = self.colors.shape[0]
        if self.origins.shape != (m, 3) or self.directions.shape != (m, 3):
            raise ValueError("ray records must share one count")
        if self.masks is not None and self.masks.shape != (m,):
            raise ValueError("masks must cover every ray")

    def __len__(self):
        return self.colors.shape[0]


class RaySource:
    """Precomputed per-view rays, targets and masks for fast batch sampling."""

    def __init__(self, dataset: Dataset, use_mask: bool = True):
        if len(dataset) < 2:
            raise ValueError("training needs at least two views")
        if use_mask and not dataset.has_masks:
            raise ValueError("mask supervision requested but the dataset has no masks")
        self.use_mask = use_mask
        self.origins, self.directions, self.colors, self.masks = [], [], [], []
        for i, cam in enumerate(dataset.cameras):
            o, d = cam.pixel_rays()
            self.origins.append(o)
            self.directions.append(d)
            self.colors.append(dataset.images[i].reshape(-1, 3).astype(np.float64) / 255.0)
            if use_mask:
                self.masks.append(np.asarray(dataset.masks[i]).reshape(-1).astype(np.float64))

    def __len__(self):
        return len(self.origins)

    def sample(self, rng: np.random.Generator, m: int) -> RayBatch:
        """``m`` pixels drawn with replacement from one uniformly chosen view."""
        view = int(rng.integers(len(self)))
        idx = rng.integers(self.colors[view].shape[0], size=m)
        masks = self.masks[view][idx] if self.use_mask else None
        return RayBatch(self.colors[view][idx], self.origins[view][idx],
                        self.directions[view][idx], masks)


@dataclass
class BatchRender:
    colors: Node  # (m, 3)
    opacity: Node  # (m,)
    gradients: Node | None  # (k, 3) at every mid-point of the hit rays
    mid_points: np.ndarray


def sample_sections(net: NeuralSdf, batch: RayBatch, rng: np.random.Generator,
                    config: TrainConfig):
    """Hierarchical section parameters for the rays hitting the bounding sphere."""
    near, far, hit = ray_sphere_clip(batch.origins, batch.directions, net.bounding_radius)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return idx, np.zeros((0, config.samples_per_ray + 1))
    ts = hierarchical_sample_batch(net.sdf, batch.origins[idx], batch.directions[idx],
                                   near[idx], far[idx], rng, config.n_coarse,
                                   config.n_importance, config.upsample_rounds)
    return idx, ts


def render_batch(net: NeuralSdf, P: dict[str, Node], batch: RayBatch, idx: np.ndarray,
                 ts: np.ndarray) -> BatchRender:
    """Taped volume rendering of ``batch`` at fixed section parameters.

    ``idx`` lists the rays that hit the bounding sphere and ``ts`` their
    sections; the other rays render as black with zero opacity.
    """
    tape = P["raw_s"].tape
    dt = np.dtype(net.config.dtype)
    m = len(batch)
    if idx.size == 0:
        zero = tape.const(np.zeros((m, 3), dtype=dt))
        return BatchRender(zero, tape.const(np.zeros(m, dtype=dt)), None, np.zeros((0, 3)))
    o = batch.origins[idx]
    d = batch.directions[idx]
    r, k1 = ts.shape
    sec_pts = (o[:, None] + ts[..., None] * d[:, None]).reshape(-1, 3)
    f_sec, _, _ = net.sdf_forward(P, sec_pts, want_grad=False)
    mid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    mid_pts = (o[:, None] + mid[..., None] * d[:, None]).reshape(-1, 3)
    _, feat, grad = net.sdf_forward(P, mid_pts, want_grad=True)
    views = np.repeat(d, k1 - 1, axis=0)
    rgb = ad.reshape(net.color_forward(P, mid_pts, views, grad, feat), (r, k1 - 1, 3))

    s = ad.exp(P["raw_s"])
    phi = ad.sigmoid(ad.mul(ad.reshape(f_sec, (r, k1)), s))
    prev, nxt = phi[:, :-1], phi[:, 1:]
    alpha = ad.maximum(ad.div(ad.sub(prev, nxt), ad.maximum(prev, PHI_FLOOR)), 0.0)
    trans = ad.cumprod_exclusive(ad.sub(1.0, alpha))
    w = ad.mul(trans, alpha)
    c_hit = ad.sum_(ad.mul(ad.reshape(w, (r, k1 - 1, 1)), rgb), axis=1)
    o_hit = ad.sum_(w, axis=1)
    if idx.size == m:
        return BatchRender(c_hit, o_hit, grad, mid_pts)
    # scatter hit rows into the batch; misses read a trailing zero row
    slot = np.full(m, r)
    slot[idx] = np.arange(r)
    c_all = ad.concat([c_hit, tape.const(np.zeros((1, 3), dtype=dt))], axis=0)[slot]
    o_all = ad.concat([o_hit, tape.const(np.zeros(1, dtype=dt))], axis=0)[slot]
    return BatchRender(c_all, o_all, grad, mid_pts)


@dataclass
class LossTerms:
    total: Node
    color: Node
    eikonal: Node | None
    mask: Node | None

    def values(self) -> dict[str, float]:
        def val(x):
            return float(x.value) if x is not None else 0.0
        return {"total": val(self.total), "color": val(self.color),
                "eikonal": val(self.eikonal), "mask": val(self.mask)}


def batch_loss(net: NeuralSdf, P: dict[str, Node], batch: RayBatch, idx, ts,
               config: TrainConfig) -> LossTerms:
    out = render_batch(net, P, batch, idx, ts)
    lc = color_loss(out.colors, batch.colors.astype(out.colors.value.dtype))
    le = eikonal_from_gradients(out.gradients) if out.gradients is not None else None
    lm = None
    if config.use_mask and batch.masks is not None:
        lm = mask_loss(out.opacity, batch.masks)
    tape = P["raw_s"].tape
    total = total_loss(lc, le if le is not None else tape.const(np.zeros((), lc.value.dtype)),
                       lm, config.lambda_eikonal, config.beta_mask)
    return LossTerms(total, lc, le, lm)


def loss_and_grads(net: NeuralSdf, batch: RayBatch, idx, ts, config: TrainConfig):
    """Loss terms and parameter gradients for fixed ray sections."""
    tape = ad.Tape()
    P = net.tape_params(tape)
    terms = batch_loss(net, P, batch, idx, ts, config)
    tape.backward(terms.total)
    grads = {k: n.adjoint for k, n in P.items()}
    values = terms.values()
    tape.clear()
    return values, grads


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def tune_allocator() -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Training allocates and frees many multi-megabyte arrays per step; with
    the default thresholds each one costs a round of page faults.  No-op
    (returns False) off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, 1 << 30)) and bool(
            libc.mallopt(m_trim_threshold, 1 << 30))
    except (OSError, AttributeError):
        return False


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5EED])


@dataclass
class TrainResult:
    net: NeuralSdf
    history: list[dict] = field(default_factory=list)
    state: AdamState | None = None
    iteration: int = 0


def _lr_scales(config: TrainConfig) -> dict[str, float]:
    return {"raw_s": config.s_lr_scale}


def train_step(net: NeuralSdf, source: RaySource, state: AdamState, iteration: int,
               config: TrainConfig) -> dict:
    rng = iteration_rng(config.seed, iteration)
    batch = source.sample(rng, config.batch_rays)
    idx, ts = sample_sections(net, batch, rng, config)
    values, grads = loss_and_grads(net, batch, idx, ts, config)
    lr = learning_rate(iteration, config)
    adam_step(net.params, grads, state, iteration, lr, _lr_scales(config))
    values.update({"iter": iteration, "lr": lr, "s": net.s})
    return values


def _write_log_rows(fh, rows) -> None:
    w = csv.writer(fh, lineterminator="\n")
    for row in rows:
        w.writerow([row["iter"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _truncate_log(path: Path, start: int) -> None:
    """Keep the header and rows for iterations before ``start``."""
    if not path.exists():
        with path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)
        return
    with path.open(newline="") as fh:
        lines = fh.read().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if ln.strip() and int(ln.split(",", 1)[0]) < start]
    with path.open("w", newline="") as fh:
        fh.write("".join(kept))


def checkpoint_path(out_dir, iteration: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"iter_{iteration:06d}.npz"


def train(dataset: Dataset, config: TrainConfig, mlp: MlpConfig | None = None,
          out_dir=None, resume=None, net: NeuralSdf | None = None, log=None) -> TrainResult:
    """Optimise a neural SDF on ``dataset``.

    With ``out_dir`` the run writes ``config.json``, ``loss.csv``, periodic
    checkpoints under ``checkpoints/`` and ``final.npz``.  ``resume`` names a
    checkpoint to continue from; the loss log is continued in place.
    """
    tune_allocator()
    source = RaySource(dataset, config.use_mask)
    state = None
    start = 0
    if resume is not None:
        net, start, moments, _ = load_checkpoint(resume)
        if moments is None:
            raise ValueError(f"{resume}: checkpoint has no optimiser state")
        state = AdamState(*moments)
    elif net is None:
        mlp = mlp or PRESETS["desk"]
        net = geometric_init(mlp, init_rng(config.seed), scale=dataset.bounding_radius,
                             initial_s=config.initial_s)
    if state is None:
        state = AdamState.zeros_like(net.params)

    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        snapshot = {"train": asdict(config), "mlp": asdict(net.config),
                    "scale": net.scale, "resumed_from": str(resume) if resume else None}
        (out / "config.json").write_text(json.dumps(snapshot, indent=2) + "\n")
        log_path = out / "loss.csv"
        _truncate_log(log_path, start)
        fh = log_path.open("a", newline="")
    history = []
    t0 = time.perf_counter()
    try:
        for it in range(start, config.iterations):
            row = train_step(net, source, state, it, config)
            history.append(row)
            if fh is not None:
                _write_log_rows(fh, [row])
            done = it + 1
            if out is not None and done % config.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(checkpoint_path(out, done), net, done, (state.m, state.v))
            if log is not None and (done % 100 == 0 or done == config.iterations):
                log(f"iter {done}/{config.iterations} loss {row['total']:.5f} "
                    f"color {row['color']:.5f} eik {row['eikonal']:.5f} s {row['s']:.2f} "
                    f"({time.perf_counter() - t0:.0f}s)")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "final.npz", net, config.iterations, (state.m, state.v))
    return TrainResult(net, history, state, config.iterations)


def config_from_preset(preset: str, **overrides) -> TrainConfig:
    if preset not in TRAIN_PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return replace(TRAIN_PRESETS[preset], **overrides)
