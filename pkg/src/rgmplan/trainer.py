"""Adversarial training of the recurrent generator against D1 and D2."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .model import RGM, RGMConfig

LOG_FLOOR = 1e-8
MAGIC = b"RGM1"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    label_real: float = 0.9
    label_fake: float = 0.0
    clip_bound: float = 0.05
    T: int = 4
    seed: int = 0
    generator_loss: str = "minimax"

    def __post_init__(self):
        if not 0.0 < self.label_real <= 1.0:
            raise ValueError("label_real must lie in (0, 1]")
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")
        if self.generator_loss not in GENERATOR_LOSS_FORMS:
            raise ValueError(f"generator_loss must be one of {GENERATOR_LOSS_FORMS}")
        if self.batch_size < 1 or self.T < 1:
            raise ValueError("batch_size and T must be positive")


@dataclass
class LossReport:
    step: int
    l_g: float
    l_d1: float
    l_d2: float
    d1_fake_steps: list[float]
    d2_fake_steps: list[float]
    mean_real_score: float
    mean_fake_score: float

    def csv_row(self) -> list:
        return [self.step, self.l_g, self.l_d1, self.l_d2, self.mean_real_score, self.mean_fake_score]


GENERATOR_LOSS_FORMS = ("minimax", "nonsaturating")
CSV_HEADER = ["step", "l_g", "l_d1", "l_d2", "mean_real_score", "mean_fake_score"]


# ------------------------------------------------------------------ losses


def generator_weights(T: int) -> list[float]:
    """(i - 1)^2 / T^2 for i = 1..T: later passes count more, the first not at all."""
    return [(i - 1) ** 2 / T**2 for i in range(1, T + 1)]


def _score(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=float)))


def loss_generator(d1_scores: Sequence, d2_scores: Sequence, T: int | None = None, form: str = "minimax") -> Tensor:
    """sum_i w_i * [mean log(1 - D1(h_i)) + mean log(1 - D2(h_i))], minimized by G.

    ``form="nonsaturating"`` swaps each log(1 - D) for -log(D): same fixed
    point, but the gradient stays large while D confidently rejects fakes.
    """
    if form not in GENERATOR_LOSS_FORMS:
        raise ValueError(f"unknown generator loss form {form!r}")
    T = len(d1_scores) if T is None else T
    if len(d1_scores) != T or len(d2_scores) != T:
        raise ValueError(f"expected {T} score pairs")
    total = None
    for w, s1, s2 in zip(generator_weights(T), d1_scores, d2_scores):
        if w == 0.0:
            continue
        if form == "minimax":
            term = ad.log(1.0 - _score(s1), LOG_FLOOR).mean() + ad.log(1.0 - _score(s2), LOG_FLOOR).mean()
        else:
            term = -(ad.log(_score(s1), LOG_FLOOR).mean() + ad.log(_score(s2), LOG_FLOOR).mean())
        term = term * w
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total


def loss_discriminator(real_scores, fake_scores: Sequence, T: int | None = None, label_real: float = 0.9,
                       label_fake: float = 0.0) -> Tensor:
    """Negated discriminator objective in cross-entropy form.

    The real term uses the (smoothed) target ``label_real``; each of the T
    fake terms targets ``label_fake`` and is weighted 1/T.
    """
    T = len(fake_scores) if T is None else T
    if len(fake_scores) != T:
        raise ValueError(f"expected {T} fake score sets")
    loss = _bce(_score(real_scores), label_real)
    for s in fake_scores:
        loss = loss + _bce(_score(s), label_fake) * (1.0 / T)
    return loss


def _bce(s: Tensor, target: float) -> Tensor:
    out = None
    if target > 0.0:
        out = ad.log(s, LOG_FLOOR).mean() * (-target)
    if target < 1.0:
        neg = ad.log(1.0 - s, LOG_FLOOR).mean() * (-(1.0 - target))
        out = neg if out is None else out + neg
    return out


loss_d1 = loss_discriminator
loss_d2 = loss_discriminator


# ------------------------------------------------------------------ optimizer


def adam_step(params: Iterable[Parameter], cfg: TrainConfig, t: int) -> None:
    """In-place Adam update at (1-based) step ``t`` using each parameter's ``.grad``."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p in params:
        g = p.grad
        p.moment1 *= b1
        p.moment1 += (1 - b1) * g
        p.moment2 *= b2
        p.moment2 += (1 - b2) * g * g
        mhat = p.moment1 / c1
        vhat = p.moment2 / c2
        p.data -= (cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.data.dtype)


def clip_weights(params: Iterable[Parameter], bound: float) -> None:
    if bound <= 0:
        raise ValueError("bound must be positive")
    for p in params:
        np.clip(p.data, -bound, bound, out=p.data)


# ------------------------------------------------------------------ data


@dataclass
class TrainData:
    """Stacked training images as float arrays in [0, 1], shape (N, 3, S, S)."""

    maps: np.ndarray
    states: np.ndarray
    truths: np.ndarray

    def __post_init__(self):
        n = len(self.maps)
        if n == 0:
            raise ValueError("empty dataset")
        if not (self.maps.shape == self.states.shape == self.truths.shape):
            raise ValueError("map, state and ground-truth stacks differ in shape")
        if self.maps.ndim != 4 or self.maps.shape[1] != 3:
            raise ValueError(f"expected (N, 3, S, S) stacks, got {self.maps.shape}")

    def __len__(self):
        return len(self.maps)

    @property
    def image_size(self) -> int:
        return self.maps.shape[-1]

    def subset(self, idx) -> "TrainData":
        return TrainData(self.maps[idx], self.states[idx], self.truths[idx])

    @classmethod
    def from_images(cls, maps, states, truths) -> "TrainData":
        def stack(imgs):
            return np.stack([np.asarray(i, dtype=np.float32).transpose(2, 0, 1) / 255.0 for i in imgs])

        return cls(stack(maps), stack(states), stack(truths))


# ------------------------------------------------------------------ training loop


class Trainer:
    def __init__(self, model: RGM, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.adam_t = {"g": 0, "d": 0}
        self.epoch = 0

    def _t(self, x: np.ndarray) -> Tensor:
        return Tensor(x, dtype=self.model.dtype)

    def train_step(self, m: np.ndarray, q: np.ndarray, gt: np.ndarray) -> LossReport:
        model, cfg = self.model, self.cfg
        model.training = True
        n, T = len(m), cfg.T
        m_t, q_t, gt_t = self._t(m), self._t(q), self._t(gt)
        z0 = model.noise(self.rng, n)

        with ad.Tape() as g_tape:
            fakes = model.generate(m_t, q_t, z0, T)

        # (1) discriminator update on real and all T (detached) fake outputs.
        # Real and fake images share one batch so BatchNorm sees both.
        fake_stack = self._t(np.concatenate([h.data for h in fakes]))
        m_rep = self._t(np.concatenate([m] * (T + 1)))
        q_rep = self._t(np.concatenate([q] * (T + 1)))
        d_params = model.discriminator_params
        model.zero_grad(d_params)
        reports = {}
        for which, cond in (("d1", m_rep), ("d2", q_rep)):
            with ad.Tape() as tape:
                scores = model.discriminate(which, ad.concat([gt_t, fake_stack], axis=0), cond)
                real, fake_steps = _split_steps(scores, n, T)
                loss = loss_discriminator(real, fake_steps, T, cfg.label_real, cfg.label_fake)
            ad.backward(tape, loss)
            reports[which] = (loss.item(), float(real.data.mean()), [float(f.data.mean()) for f in fake_steps])
        self.adam_t["d"] += 1
        adam_step(d_params, cfg, self.adam_t["d"])
        # (2) keep discriminator weights inside the clip box
        clip_weights(model.discriminator_weights, cfg.clip_bound)

        # (3) generator update against the refreshed discriminators
        g_params = model.generator_params
        model.zero_grad(model.params.values())
        with g_tape:
            batch = ad.concat([gt_t] + fakes, axis=0)
            _, f1 = _split_steps(model.discriminate("d1", batch, m_rep), n, T)
            _, f2 = _split_steps(model.discriminate("d2", batch, q_rep), n, T)
            l_g = loss_generator(f1, f2, T, cfg.generator_loss)
        ad.backward(g_tape, l_g)
        self.adam_t["g"] += 1
        adam_step(g_params, cfg, self.adam_t["g"])
        model.zero_grad(d_params)

        self.step += 1
        (l1, r1, f1), (l2, r2, f2) = reports["d1"], reports["d2"]
        return LossReport(
            step=self.step,
            l_g=l_g.item(),
            l_d1=l1,
            l_d2=l2,
            d1_fake_steps=f1,
            d2_fake_steps=f2,
            mean_real_score=(r1 + r2) / 2,
            mean_fake_score=(float(np.mean(f1)) + float(np.mean(f2))) / 2,
        )

    def train_epoch(self, data: TrainData, max_steps: int | None = None) -> Iterator[LossReport]:
        order = self.rng.permutation(len(data))
        bs = self.cfg.batch_size
        for k in range(0, len(order), bs):
            if max_steps is not None and self.step >= max_steps:
                return
            idx = np.sort(order[k : k + bs])
            yield self.train_step(data.maps[idx], data.states[idx], data.truths[idx])
        self.epoch += 1

    def fit(self, data: TrainData, epochs: int | None = None, max_steps: int | None = None) -> list[LossReport]:
        epochs = self.cfg.epochs if epochs is None else epochs
        out = []
        while self.epoch < epochs:
            if max_steps is not None and self.step >= max_steps:
                break
            out.extend(self.train_epoch(data, max_steps))
        return out


def _split_steps(scores: Tensor, n: int, T: int) -> tuple[Tensor, list[Tensor]]:
    """Split scores over ``[real; h_1; ...; h_T]`` (n rows each)."""
    return scores[:n], [scores[(i + 1) * n : (i + 2) * n] for i in range(T)]


def write_loss_csv(reports: Iterable[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


# ------------------------------------------------------------------ checkpoints


class CheckpointError(ValueError):
    pass


def _tensor_table(trainer_or_model) -> dict[str, np.ndarray]:
    model = trainer_or_model.model if isinstance(trainer_or_model, Trainer) else trainer_or_model
    table = {}
    for name, p in model.params.items():
        table[name] = p.data
        table[f"{name}#m1"] = p.moment1
        table[f"{name}#m2"] = p.moment2
    for name, b in model.buffers.items():
        table[f"{name}#buf"] = b
    return table


def save_checkpoint(trainer: Trainer | RGM, path: str | Path | None = None) -> bytes:
    """Serialize weights, optimizer moments, BN buffers and (for a trainer) progress.

    Layout: ``b"RGM1"``, u64 little-endian header length, JSON header, then
    the raw little-endian float32 tensors in header order.
    """
    model = trainer.model if isinstance(trainer, Trainer) else trainer
    header = {"config": model.cfg.to_dict(), "tensors": []}
    if isinstance(trainer, Trainer):
        header.update(
            train_config=asdict(trainer.cfg),
            epoch=trainer.epoch,
            step=trainer.step,
            adam_t=trainer.adam_t,
            rng_state=trainer.rng.bit_generator.state,
        )
    payload = io.BytesIO()
    offset = 0
    for name, arr in _tensor_table(model).items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.write(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload.getvalue()
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(source: str | Path | bytes, cfg: RGMConfig | None = None) -> tuple[RGM, Trainer | None]:
    """Rebuild the model (and trainer, when the checkpoint has one) bit-exactly."""
    blob = source if isinstance(source, bytes) else Path(source).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not an RGM1 checkpoint")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    try:
        header = json.loads(blob[12 : 12 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    saved_cfg = RGMConfig(**header["config"])
    if cfg is not None and cfg != saved_cfg:
        raise CheckpointError(f"checkpoint config {saved_cfg} does not match {cfg}")
    model = RGM(saved_cfg)
    table = _tensor_table(model)
    payload = memoryview(blob)[12 + hlen :]
    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in table:
            raise CheckpointError(f"unknown tensor {name!r}")
        if table[name].shape != shape:
            raise CheckpointError(f"{name}: shape {shape} does not match config {table[name].shape}")
        nbytes = 4 * math.prod(shape)
        lo = entry["offset"]
        if lo + nbytes > len(payload):
            raise CheckpointError(f"truncated payload at {name!r}")
        table[name][...] = np.frombuffer(payload[lo : lo + nbytes], dtype="<f4").reshape(shape)
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    trainer = None
    if "train_config" in header:
        trainer = Trainer(model, TrainConfig(**header["train_config"]))
        trainer.epoch = header["epoch"]
        trainer.step = header["step"]
        trainer.adam_t = dict(header["adam_t"])
        trainer.rng.bit_generator.state = header["rng_state"]
    return model, trainer
