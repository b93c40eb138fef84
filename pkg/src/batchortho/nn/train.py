"""SGD with momentum, plateau-driven schedule, and the epoch loop."""
import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..data import augment, batch_iter
from ..errors import BatchOrthoError, TrainingDivergedError
from .blocks import build_net, softmax_xent_backward, softmax_xent_forward

METRIC_FIELDS = ("epoch", "phase", "loss", "error_rate", "batch_size", "lr", "alpha")
BATCH_CAPS = {"mnist": 2 ** 11, "svhn": 2 ** 10}


@dataclass(frozen=True)
class SgdSchedule:
    lr: float = 0.125
    momentum: float = 0.9
    batch: int = 256
    weight_decay: float = 0.0
    plateau_patience: int = 2
    min_improvement: float = 1e-4
    rules: str = "mnist"

    @property
    def batch_cap(self):
        return BATCH_CAPS[self.rules]

    def on_plateau(self):
        """Schedule after one "learning slows" event."""
        if self.rules == "mnist":
            if self.batch < self.batch_cap:
                return replace(self, batch=min(2 * self.batch, self.batch_cap), lr=0.75 * self.lr)
            return replace(self, lr=0.5 * self.lr)
        if self.rules == "svhn":
            if self.batch < self.batch_cap:
                return replace(self, batch=min(2 * self.batch, self.batch_cap))
            return replace(self, lr=0.5 * self.lr, momentum=0.5)
        raise ValueError(f"unknown rule set {self.rules!r}")


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear ramp of the running-covariance factor from ``start`` to ``end``."""
    start: float = 0.9
    end: float = 0.99

    def at(self, epoch, epochs):
        if epochs <= 1:
            return self.start
        return self.start + (self.end - self.start) * epoch / (epochs - 1)

    @classmethod
    def parse(cls, text):
        parts = text.split(":")
        if len(parts) == 1:
            a = float(parts[0])
            return cls(a, a)
        if len(parts) == 2:
            return cls(float(parts[0]), float(parts[1]))
        raise ValueError(f"alpha schedule must be 'a' or 'a0:a1', got {text!r}")


@dataclass(frozen=True)
class TrainConfig:
    db: str = "mnist"
    spec: str = "BN"
    epochs: int = 5
    seed: int = 0
    augment: bool = False
    eval_chunk: int = 500
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    history: list
    net: object
    schedule: SgdSchedule

    def final(self, phase="val"):
        return [r for r in self.history if r["phase"] == phase][-1]

    def metrics_csv(self):
        return metrics_to_csv(self.history)


def metrics_to_csv(rows):
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return out.getvalue()


def sgd_step(net, velocity, schedule):
    """``v <- mom v - lr (g + wd p)``; ``p <- p + v`` in place."""
    for name, module, key, p in net.named_params():
        g = module.grads[key]
        if schedule.weight_decay:
            g = g + schedule.weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= schedule.momentum
        v -= schedule.lr * g
        p += v


def _augment_batch(x, db, seed, epoch, step):
    rng = np.random.default_rng([seed, epoch, step, 1])
    return np.stack([augment(img, db, rng) for img in x])


def evaluate(net, ds, chunk=500):
    """Mean loss and error rate in the eval phase (running statistics only)."""
    total_loss = 0.0
    wrong = 0
    for start in range(0, len(ds), chunk):
        x = ds.images[start:start + chunk]
        y = ds.labels[start:start + chunk]
        logits = net.forward(x, "eval")
        loss, probs = softmax_xent_forward(logits, y)
        total_loss += loss * y.shape[0]
        wrong += int(np.sum(np.argmax(probs, axis=1) != y))
    return total_loss / len(ds), wrong / len(ds)


def train(config, train_ds, val_ds, log=None):
    """Run ``config.epochs`` epochs; returns the per-epoch metric history."""
    net = build_net(config.db, config.spec, seed=config.seed)
    schedule = config.schedule
    velocity = {}
    history = []
    best = np.inf
    stall = 0
    step = 0
    for epoch in range(config.epochs):
        alpha = config.alpha.at(epoch, config.epochs)
        net.set_alpha(alpha)
        batch = min(schedule.batch, len(train_ds))
        losses, wrong, seen = [], 0, 0
        for x, y in batch_iter(train_ds, batch, config.seed, epoch):
            if config.augment:
                x = _augment_batch(x, config.db, config.seed, epoch, step)
            try:
                logits, bad = net.forward(x, "train", check_finite=True)
            except BatchOrthoError as exc:
                raise TrainingDivergedError(net.current, step, epoch) from exc
            loss, probs = softmax_xent_forward(logits, y)
            if bad is not None or not np.isfinite(loss):
                raise TrainingDivergedError(bad or "loss", step, epoch)
            net.backward(softmax_xent_backward(probs, y))
            sgd_step(net, velocity, schedule)
            losses.append(loss)
            wrong += int(np.sum(np.argmax(probs, axis=1) != y))
            seen += y.shape[0]
            step += 1
        common = {"batch_size": batch, "lr": schedule.lr, "alpha": alpha}
        history.append({"epoch": epoch + 1, "phase": "train", "loss": float(np.mean(losses)),
                        "error_rate": wrong / seen, **common})
        val_loss, val_err = evaluate(net, val_ds, config.eval_chunk)
        history.append({"epoch": epoch + 1, "phase": "val", "loss": val_loss,
                        "error_rate": val_err, **common})
        if log is not None:
            log(f"epoch {epoch + 1}: train loss {history[-2]['loss']:.4f} "
                f"val loss {val_loss:.4f} val err {val_err:.4f} B={batch} lr={schedule.lr:g}")
        if val_loss < best - schedule.min_improvement:
            best = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= schedule.plateau_patience:
                schedule = schedule.on_plateau()
                stall = 0
    return TrainResult(history, net, schedule)
