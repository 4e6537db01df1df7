"""Analytic vs central finite-difference gradients on a small end-to-end model."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import BackboneConfig
from .groups import contiguous_assignment
from .heads import total_loss
from .model import MGGNet, ModelConfig
from .tensor import Tape, backward

FAMILIES = ("backbone", "gal", "gcl", "heads")


def tiny_config() -> ModelConfig:
    """N=6 attributes in K=3 groups, taps at two blocks of a 16x16 backbone."""
    return ModelConfig(BackboneConfig.tiny(), contiguous_assignment([2, 2, 2]))


@dataclass
class Probe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    probes: list[Probe] = field(default_factory=list)
    tolerance: float = 1e-4
    seconds: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.probes) and self.max_rel_err <= self.tolerance

    def family_counts(self) -> dict[str, int]:
        counts = {f: 0 for f in FAMILIES}
        for p in self.probes:
            counts[p.name.split(".", 1)[0]] += 1
        return counts

    def summary(self) -> str:
        buf = io.StringIO()
        counts = ", ".join(f"{k} {v}" for k, v in self.family_counts().items())
        buf.write(f"probed {len(self.probes)} coordinates ({counts}) in {self.seconds:.1f}s\n")
        worst = max(self.probes, key=lambda p: p.rel_err, default=None)
        if worst is not None:
            buf.write(
                f"worst {worst.name}{list(worst.index)}: analytic {worst.analytic:.6e} numeric {worst.numeric:.6e}\n"
            )
        buf.write(f"max rel err {self.max_rel_err:.3e} (tolerance {self.tolerance:.0e}): {'PASS' if self.passed else 'FAIL'}\n")
        return buf.getvalue()


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _batch(config: ModelConfig, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    images = rng.uniform(0.0, 1.0, size=(batch, *config.backbone.input_shape))
    labels = np.zeros((batch, config.N), dtype=np.int64)
    for a in range(config.N):
        # both classes present in every column
        col = rng.permutation(np.arange(batch) % 2)
        labels[:, a] = col
    return images, labels


def run_gradcheck(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    per_family: int = 30,
    batch: int = 4,
    h: float = 1e-4,
    floor: float = 1e-6,
    tolerance: float = 1e-4,
    mode: str = "plain",
) -> GradcheckReport:
    """Probe ``per_family`` random coordinates of each parameter family.

    The loss is the full training objective in train mode. Running statistics
    are restored after every evaluation so probes do not perturb each other.
    """
    t0 = time.perf_counter()
    config = config or tiny_config()
    model = MGGNet(config, seed=seed)
    store = model.store
    rng = np.random.default_rng([seed, 2])
    images, labels = _batch(config, batch, rng)
    stats0 = {k: (s.mean.copy(), s.var.copy()) for k, s in store.stats_items()}

    def reset_stats() -> None:
        for k, s in store.stats_items():
            s.mean[...] = stats0[k][0]
            s.var[...] = stats0[k][1]

    def loss_value() -> float:
        with Tape():
            result = model.forward(images, mode="train")
            loss, _ = total_loss(result.preds, labels, config.blocks, mode)
        reset_stats()
        return float(loss.data)

    store.zero_grad()
    with Tape():
        result = model.forward(images, mode="train")
        loss, _ = total_loss(result.preds, labels, config.blocks, mode)
        backward(loss)
    reset_stats()

    report = GradcheckReport(tolerance=tolerance)
    for family, names in store.owners().items():
        if family not in FAMILIES or not names:
            continue
        sizes = np.array([store[n].data.size for n in names], dtype=np.float64)
        for _ in range(per_family):
            name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
            t = store[name]
            flat_idx = int(rng.integers(t.data.size))
            idx = np.unravel_index(flat_idx, t.data.shape)
            analytic = 0.0 if t.grad is None else float(t.grad[idx])
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = loss_value()
            t.data[idx] = orig - h
            fm = loss_value()
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            rel = relative_error(analytic, numeric, floor)
            report.probes.append(Probe(name, tuple(int(i) for i in idx), analytic, numeric, rel))
    store.zero_grad()
    report.seconds = time.perf_counter() - t0
    return report
