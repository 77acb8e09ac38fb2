"""Training engine: losses, rmsprop, straight-through training loop.

Binarized layers keep latent real weights; the forward pass sees
alpha * sign(latent) and gradients reach the latents through the
straight-through estimator, after which latents are clipped to [-1, 1].
Per-epoch metrics go to an append-only JSONL log.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentConfig, Sample, augment, target_heatmaps
from .metrics import decode_heatmaps, pckh
from .network import Network

RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-8


def _checked(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss input contains NaN or Inf")


def loss_l2(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixels; returns (loss, dloss/dpred)."""
    _checked(pred, target)
    diff = pred - target
    loss = float((diff * diff).mean())
    return loss, (2.0 / diff.size) * diff


def loss_sigmoid_ce(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-wise sigmoid cross entropy with soft (Gaussian) targets."""
    _checked(logits, target)
    z, t = logits, target
    # stable form: max(z,0) - z t + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())
    sig = 1.0 / (1.0 + np.exp(-z))
    return loss, (sig - t) / z.size


def loss_multiclass_ce(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Log-softmax cross entropy over class maps, mean over pixels.

    logits: (n, c, h, w); mask: (n, h, w) integer class ids.
    """
    _checked(logits)
    n, c, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, mask[:, None], axis=1)[:, 0]
    loss = float(-picked.mean())
    softmax = np.exp(logp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, mask[:, None], 1.0, axis=1)
    return loss, (softmax - onehot) / (n * h * w)


LOSSES = {"l2_heatmap": loss_l2, "sigmoid_ce": loss_sigmoid_ce}


@dataclass
class LrSchedule:
    """Initial rate with a fixed number of multiplicative drops spread over
    the run, landing on the final rate."""

    initial: float = 2.5e-4
    final: float = 5e-5
    drops: int = 4
    total_epochs: int = 100

    def at_epoch(self, epoch: int) -> float:
        if self.drops <= 0 or self.initial == self.final:
            return self.initial
        step = (self.final / self.initial) ** (1.0 / self.drops)
        interval = max(1, self.total_epochs // (self.drops + 1))
        n_drops = min(self.drops, epoch // interval)
        return self.initial * step**n_drops


@dataclass
class TrainState:
    net: Network
    schedule: LrSchedule = field(default_factory=LrSchedule)
    loss_kind: str = "sigmoid_ce"
    seed: int = 0
    epoch: int = 0
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.loss_kind not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}; choose from {sorted(LOSSES)}")
        self._binarized = {
            n.id for n in self.net.conv_nodes() if n.binarized
        }

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.net.weights)
        for nid, bn in self.net.bn.items():
            out[f"{nid}.gamma"] = bn.gamma
            out[f"{nid}.beta"] = bn.beta
        return out


def rmsprop_step(state: TrainState, grads: dict[str, np.ndarray], lr: float):
    """In-place rmsprop update; binarized latents are clipped to [-1, 1]."""
    params = state.params()
    for key, g in grads.items():
        p = params[key]
        acc = state.accumulators.get(key)
        if acc is None:
            acc = np.zeros_like(p)
            state.accumulators[key] = acc
        acc *= RMSPROP_DECAY
        acc += (1.0 - RMSPROP_DECAY) * g * g
        p -= lr * g / (np.sqrt(acc) + RMSPROP_EPS)
        if key in state._binarized:
            np.clip(p, -1.0, 1.0, out=p)
    state.net.packed.clear()  # stale after any weight change


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    sigma: float = 1.0
    augment: AugmentConfig | None = None
    log_path: str | Path | None = None
    eval_every: int = 5
    pck_thresh: float = 0.1


def _batch_targets(samples: list[Sample], out_res, in_res, sigma):
    return np.stack([
        target_heatmaps(s.keypoints, in_res, out_res, sigma) for s in samples
    ])


def evaluate_pck(net: Network, samples: list[Sample], thresh: float = 0.1,
                 batch_size: int = 8) -> float:
    """Mean PCK at thresh * head_size using eval-mode forward passes."""
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = np.stack([s.image for s in chunk]).astype(np.float32)
        maps = net.forward(x, mode="eval")
        preds.append(decode_heatmaps(maps, x.shape[2:]))
    pred = np.concatenate(preds)
    gts = np.stack([s.keypoints for s in samples])
    heads = np.array([s.head_size for s in samples])
    _, mean = pckh(pred, gts, heads, thresh=thresh)
    return mean


def train(state: TrainState, samples: list[Sample], cfg: TrainConfig) -> list[dict]:
    """Run the training loop; returns (and optionally logs) per-epoch records."""
    net = state.net
    loss_fn = LOSSES[state.loss_kind]
    in_res = samples[0].image.shape[1:]
    out_res = (in_res[0] // 4, in_res[1] // 4)
    history = []
    log_file = Path(cfg.log_path).open("a") if cfg.log_path else None
    order_rng = np.random.default_rng(state.seed)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = state.schedule.at_epoch(state.epoch)
        order = order_rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = []
            for i in idx:
                s = samples[int(i)]
                if cfg.augment is not None:
                    # per-sample rng keyed by (seed, epoch, index): parallel
                    # loading could not change the stream
                    srng = np.random.default_rng((state.seed, state.epoch, int(i)))
                    s = augment(s, cfg.augment, srng)
                batch.append(s)
            x = np.stack([s.image for s in batch]).astype(np.float32)
            t = _batch_targets(batch, out_res, in_res, cfg.sigma)
            pred = net.forward(x, mode="train", keep_tape=True)
            loss, dloss = loss_fn(pred, t)
            grads = net.backward(dloss.astype(np.float32))
            rmsprop_step(state, grads, lr)
            losses.append(loss)
        state.epoch += 1
        rec = {
            "epoch": state.epoch,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if cfg.eval_every and (epoch == cfg.epochs - 1 or (epoch + 1) % cfg.eval_every == 0):
            rec["pck"] = evaluate_pck(net, samples, cfg.pck_thresh, cfg.batch_size)
        history.append(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()
    if log_file:
        log_file.close()
    return history


def gradient_magnitude_report(make_net, samples: list[Sample], sigma: float = 1.0
                              ) -> dict[str, float]:
    """Mean |weight gradient| for each (loss, binarize) combination.

    make_net(binarize: bool) -> Network. Reported, not asserted: the relative
    magnitudes are empirical.
    """
    in_res = samples[0].image.shape[1:]
    out_res = (in_res[0] // 4, in_res[1] // 4)
    x = np.stack([s.image for s in samples]).astype(np.float32)
    t = _batch_targets(samples, out_res, in_res, sigma)
    report = {}
    for binarize in (True, False):
        net = make_net(binarize)
        pred = net.forward(x, mode="train", keep_tape=True)
        for name, fn in LOSSES.items():
            _, dloss = fn(pred, t)
            grads = net.backward(dloss.astype(np.float32))
            mags = np.concatenate([np.abs(g).ravel() for k, g in grads.items()
                                   if not k.endswith((".gamma", ".beta"))])
            report[f"{'binary' if binarize else 'real'}/{name}"] = float(mags.mean())
    return report
