"""Optimization loop: Adam with global-norm clipping, the stepped
learning-rate schedule, deterministic batch composition, checkpointing,
and side-by-side evaluation against the zero-filled baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import NonFiniteError, Tensor, backward, get_dtype
from .kspace import Mask, undersample
from .losses import FeatureExtractor, LossWeights, total_loss
from .metrics import psnr, ssim
from .model import ModelConfig, ModelParams, init_params, model_forward


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch: int = 8
    lr0: float = 2e-4
    decay_factor: float = 0.5
    decay_interval: int = 10_000
    decay_start: int = 50_000
    seed: int = 0
    alpha: float = 15.0
    beta: float = 0.1
    gamma: float = 0.0025
    grad_clip: float = 1.0
    perceptual_seed: int = 0
    log_every: int = 10

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Constant before decay_start; halved there and at every interval after."""
    if step < cfg.decay_start:
        return cfg.lr0
    return cfg.lr0 * cfg.decay_factor ** (1 + (step - cfg.decay_start) // cfg.decay_interval)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_indices: Sequence[int], detail: str):
        super().__init__(f"non-finite loss at step {step} on batch indices "
                         f"{list(batch_indices)}: {detail}")
        self.step = step
        self.batch_indices = list(batch_indices)


class Adam:
    """Standard Adam with bias correction, keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, store, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, tensor in store.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            tensor.data = tensor.data - step.astype(tensor.data.dtype)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: ModelParams
    opt: Adam
    extractor: FeatureExtractor
    step: int = 0
    log: List[Tuple[int, float, float, float]] = field(default_factory=list)


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    params = init_params(model_cfg, seed=train_cfg.seed)
    return TrainState(model_cfg=model_cfg, train_cfg=train_cfg, params=params,
                      opt=Adam(), extractor=FeatureExtractor(train_cfg.perceptual_seed))


def train_step(state: TrainState, xu: np.ndarray, x: np.ndarray,
               batch_indices: Sequence[int] = ()) -> float:
    """One forward/backward/update on a [B,1,h,w] batch; returns the loss."""
    cfg = state.train_cfg
    store = state.params.store
    store.zero_grad()
    try:
        out, _ = model_forward(state.model_cfg, state.params, Tensor(xu))
        loss = total_loss(cfg.weights(), out, Tensor(x), state.extractor)
        backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(state.step, batch_indices, str(exc)) from exc
    loss_val = float(loss.data)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in store.items()}
    clip_global_norm(grads, cfg.grad_clip)
    state.opt.update(store, grads, lr_schedule(cfg, state.step))
    state.step += 1
    return loss_val


def batch_order(n_images: int, batch: int, steps: int, seed: int):
    """Deterministic batch composition: reshuffled epochs, fixed chunking."""
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
    batch = min(batch, n_images)
    out = []
    while len(out) < steps:
        perm = rng.permutation(n_images)
        for i in range(0, n_images - batch + 1, batch):
            out.append(perm[i:i + batch])
            if len(out) == steps:
                break
    return out


def prepare_pairs(images: Sequence[np.ndarray], mask: Mask) -> Tuple[np.ndarray, np.ndarray]:
    """Stack (x_u, x) training pairs from ground-truth images."""
    dt = get_dtype()
    xs, xus = [], []
    for img in images:
        img2 = np.asarray(img, dtype=np.float64)
        if img2.ndim == 3 and img2.shape[0] == 1:
            img2 = img2[0]
        xs.append(img2[None].astype(dt))
        xus.append(undersample(img2[None], mask).data.astype(dt))
    return np.stack(xus), np.stack(xs)


def train_loop(state: TrainState, images: Sequence[np.ndarray], mask: Mask,
               progress: Optional[Callable[[int, float, float], None]] = None,
               stop_check: Optional[Callable[[TrainState], bool]] = None,
               stop_check_every: int = 0) -> TrainState:
    """Run state.train_cfg.steps updates (or until stop_check says done)."""
    cfg = state.train_cfg
    xu_all, x_all = prepare_pairs(images, mask)
    order = batch_order(len(images), cfg.batch, cfg.steps, cfg.seed)
    for idx in order:
        t0 = time.perf_counter()
        loss = train_step(state, xu_all[idx], x_all[idx], batch_indices=idx)
        ms = (time.perf_counter() - t0) * 1000.0
        lr = lr_schedule(cfg, state.step - 1)
        if cfg.log_every and (state.step == 1 or state.step % cfg.log_every == 0):
            state.log.append((state.step, lr, loss, ms))
            if progress is not None:
                progress(state.step, lr, loss)
        if stop_check is not None and stop_check_every and state.step % stop_check_every == 0:
            if stop_check(state):
                break
    return state


def format_log(rows: Sequence[Tuple[int, float, float, float]]) -> str:
    lines = ["step, lr, loss, wallclock-ms"]
    lines += [f"{s}, {lr:.8g}, {loss:.8g}, {ms:.2f}" for s, lr, loss, ms in rows]
    return "\n".join(lines) + "\n"


@dataclass
class EvalRow:
    index: int
    zf_psnr: float
    zf_ssim: float
    model_psnr: float
    model_ssim: float


@dataclass
class EvalReport:
    rows: List[EvalRow]

    def means(self) -> Tuple[float, float, float, float]:
        zp = float(np.mean([r.zf_psnr for r in self.rows]))
        zs = float(np.mean([r.zf_ssim for r in self.rows]))
        mp = float(np.mean([r.model_psnr for r in self.rows]))
        ms = float(np.mean([r.model_ssim for r in self.rows]))
        return zp, zs, mp, ms

    def as_csv(self) -> str:
        lines = ["index, zf_psnr, zf_ssim, model_psnr, model_ssim"]
        for r in self.rows:
            lines.append(f"{r.index}, {r.zf_psnr:.6f}, {r.zf_ssim:.6f}, "
                         f"{r.model_psnr:.6f}, {r.model_ssim:.6f}")
        zp, zs, mp, ms = self.means()
        lines.append(f"mean, {zp:.6f}, {zs:.6f}, {mp:.6f}, {ms:.6f}")
        return "\n".join(lines) + "\n"


def reconstruct(model_cfg: ModelConfig, params: ModelParams, xu: np.ndarray) -> np.ndarray:
    out, _ = model_forward(model_cfg, params, Tensor(xu.astype(get_dtype())))
    return np.asarray(out.data)


def evaluate(model_cfg: ModelConfig, params: ModelParams,
             images: Sequence[np.ndarray], mask: Mask) -> EvalReport:
    """Model vs zero-filled baseline, per image and on average."""
    rows = []
    for i, img in enumerate(images):
        img2 = np.asarray(img, dtype=np.float64)
        if img2.ndim == 3 and img2.shape[0] == 1:
            img2 = img2[0]
        xu = undersample(img2[None], mask).data
        xhat = reconstruct(model_cfg, params, xu)
        rows.append(EvalRow(
            index=i,
            zf_psnr=psnr(xu[0], img2),
            zf_ssim=ssim(xu[0], img2),
            model_psnr=psnr(xhat[0], img2),
            model_ssim=ssim(xhat[0], img2),
        ))
    return EvalReport(rows)
