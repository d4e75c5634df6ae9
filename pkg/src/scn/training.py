"""SGD training loop, evaluation, invariant monitoring and gradient checking."""

import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, NumericalError, TrainingDiverged
from .layers import extract_patches, softmax_cross_entropy
from .network import LAMBDA1_FLOOR, apply_weight_decay_and_project, decays, save_checkpoint, round_to_storage
from .solver import check_kkt

METRICS_HEADER = "epoch lr train_loss train_error test_error"
METRICS_FILE = "metrics.txt"


@dataclass(frozen=True)
class AugmentSpec:
    horizontal_flip: bool = False
    max_translate_px: int = 0

    def __post_init__(self):
        if self.max_translate_px < 0:
            raise ContractViolation("max_translate_px must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 160
    base_lr: float = 0.1
    lr_drop_epochs: tuple = (80, 160)
    lr_drop_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ContractViolation("base_lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractViolation("batch_size must be positive and epochs nonnegative")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ContractViolation(f"lr drop epochs must be strictly increasing, got {drops}")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch index."""
        drops = sum(1 for d in self.lr_drop_epochs if epoch >= d)
        return self.base_lr * self.lr_drop_factor ** drops


# ------------------------------------------------------------ augmentation

def shift_images(x, dx, dy):
    """Translate a batch by ``dx`` columns and ``dy`` rows, filling with zeros."""
    out = np.zeros_like(x)
    H, W = x.shape[-2:]
    if abs(dx) >= W or abs(dy) >= H:
        return out
    src_r = slice(max(0, -dy), H - max(0, dy))
    dst_r = slice(max(0, dy), H - max(0, -dy))
    src_c = slice(max(0, -dx), W - max(0, dx))
    dst_c = slice(max(0, dx), W - max(0, -dx))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


def flip_images(x):
    return x[..., ::-1].copy()


def augment_batch(images, spec, rng):
    """Apply one flip decision and one translation to the whole batch.

    ``images`` are already mean-subtracted, so the zero fill is the mean.
    """
    x = images
    if spec.horizontal_flip and rng.random() < 0.5:
        x = flip_images(x)
    if spec.max_translate_px:
        dx, dy = rng.integers(-spec.max_translate_px, spec.max_translate_px + 1, size=2)
        x = shift_images(x, int(dx), int(dy))
    return x


# --------------------------------------------------------------- optimizer

class SGD:
    """Momentum SGD with weight decay on the decayed parameters and the lambda1 floor.

    With ``momentum == 0`` a step is exactly
    :func:`scn.network.apply_weight_decay_and_project`.
    """

    def __init__(self, params, weight_decay, momentum):
        self.params = params
        self.mu = weight_decay
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        if self.momentum == 0:
            apply_weight_decay_and_project(self.params, grads, self.mu, lr)
            return
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g + self.mu * p if decays(name) else g
            p -= lr * v
            if name.endswith(".lambda1"):
                np.maximum(p, LAMBDA1_FLOOR, out=p)


# -------------------------------------------------------------- monitoring

class InvariantMonitor:
    """Checks runtime invariants during training and records the worst values.

    * every ``lambda1`` at least the floor after each step;
    * sparse-coding outputs nonnegative, every activation finite;
    * once per epoch, the KKT residual of ``audit_patches`` random patches
      per sparse-coding layer.
    """

    def __init__(self, audit_patches=100, audit_images=8, seed=0):
        self.audit_patches = audit_patches
        self.audit_images = audit_images
        self.rng = np.random.default_rng(seed)
        self.min_lambda1 = np.inf
        self.min_sc_output = np.inf
        self.nonfinite = 0
        self.kkt = []            # worst residual per epoch
        self.steps = 0

    def observe(self, name, layer, x, y):
        if not np.all(np.isfinite(y)):
            self.nonfinite += 1
        if layer.kind == "sc" and y.size:
            self.min_sc_output = min(self.min_sc_output, float(y.min()))

    def after_step(self, net):
        self.steps += 1
        for name, p in net.parameters().items():
            if not np.all(np.isfinite(p)):
                self.nonfinite += 1
            if name.endswith(".lambda1"):
                self.min_lambda1 = min(self.min_lambda1, float(p))

    def audit(self, net, images):
        """KKT spot check on random patches of each sparse-coding layer's input."""
        idx = self.rng.choice(len(images), size=min(self.audit_images, len(images)), replace=False)
        worst = 0.0

        def look(name, layer, x, y):
            nonlocal worst
            if layer.kind != "sc":
                return
            cols = extract_patches(x, layer.cfg.window, layer.cfg.stride, layer.cfg.pad)
            codes = y.transpose(1, 0, 2, 3).reshape(y.shape[1], -1)
            pick = self.rng.choice(cols.shape[1], size=min(self.audit_patches, cols.shape[1]), replace=False)
            p = layer.solver_params()
            for j in pick:
                worst = max(worst, check_kkt(layer.D, cols[:, j], p, codes[:, j]))

        net.forward(images[np.sort(idx)], train=False, observer=look)
        self.kkt.append(worst)
        return worst

    def summary(self):
        return {
            "steps": self.steps,
            "min_lambda1": self.min_lambda1,
            "min_sc_output": self.min_sc_output,
            "nonfinite": self.nonfinite,
            "max_kkt": max(self.kkt) if self.kkt else 0.0,
        }


def _diagnostics(net, x):
    """Layer-wise activation and gradient norms for a divergence report."""
    rows = []

    def look(name, layer, x_in, y):
        with np.errstate(all="ignore"):
            rows.append((name, float(np.linalg.norm(y))))

    try:
        net.forward(x, train=True, update_state=False, observer=look)
    except (NumericalError, FloatingPointError):
        pass
    grads = {k: float(np.linalg.norm(g)) for k, g in net.grads().items()}
    params = {k: float(np.linalg.norm(p)) for k, p in net.parameters().items()}
    return {"activation_norms": rows, "grad_norms": grads, "param_norms": params}


# ---------------------------------------------------------------- training

def evaluate(net, ds, batch_size=256):
    """Top-1 error over ``ds`` with inference-mode batch norm."""
    if len(ds) == 0:
        return 0.0
    wrong = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        logits, _ = net.forward(ds.centered(idx), train=False)
        wrong += int(np.sum(np.argmax(logits, axis=1) != ds.labels[idx]))
    return wrong / len(ds)


def format_metrics_row(epoch, lr, loss, train_error, test_error):
    return f"{epoch} {lr:.6g} {loss:.10f} {train_error:.6f} {test_error:.6f}"


@dataclass
class TrainResult:
    rows: list
    checkpoints: list
    monitor: InvariantMonitor = None


def train(net, train_ds, test_ds, cfg, out_dir=None, monitor=None, log=None, meta=None):
    """Train ``net`` in place with minibatch SGD.

    Each epoch draws a seeded permutation, steps through minibatches
    (forward, loss, backward, update) and appends one metrics row. With
    ``out_dir`` the metrics file is rewritten after every epoch and
    checkpoints are stored at each learning-rate drop and at the end.
    Before the last evaluation parameters are rounded to checkpoint
    precision so the final row matches an evaluation of the saved file.
    ``meta`` is merged into every checkpoint's manifest.
    """
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    opt = SGD(net.parameters(), cfg.weight_decay, cfg.momentum)
    rows, checkpoints = [], []
    metrics_path = os.path.join(out_dir, METRICS_FILE) if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def write_metrics():
        if metrics_path:
            with open(metrics_path, "w") as f:
                f.write("\n".join([METRICS_HEADER] + rows) + "\n")

    def checkpoint(name, epoch):
        if out_dir:
            path = os.path.join(out_dir, name)
            save_checkpoint(path, net, meta={"epoch": epoch, "seed": cfg.seed, **(meta or {})})
            checkpoints.append(path)

    write_metrics()
    observer = monitor.observe if monitor else None
    N = len(train_ds)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        if epoch > 0 and lr != cfg.lr_at(epoch - 1):
            checkpoint(f"epoch{epoch:03d}.ckpt", epoch)
        order = rng.permutation(N)
        loss_sum, wrong = 0.0, 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = augment_batch(train_ds.centered(idx), cfg.augmentation, aug_rng)
            y = train_ds.labels[idx]
            try:
                logits, caches = net.forward(x, train=True, observer=observer)
                loss, grad = softmax_cross_entropy(logits, y)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", _diagnostics(net, x)) from None
            if not np.isfinite(loss):
                diag = _diagnostics(net, x)
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss {loss}", diag)
            net.backward(caches, grad)
            opt.step(net.grads(), lr)
            if monitor:
                monitor.after_step(net)
            loss_sum += loss * len(idx)
            wrong += int(np.sum(np.argmax(logits, axis=1) != y))
        if monitor:
            monitor.audit(net, train_ds.centered(order[:max(1, monitor.audit_images)]))
        if epoch == cfg.epochs - 1:
            round_to_storage(net)
        test_error = evaluate(net, test_ds) if test_ds is not None else float("nan")
        rows.append(format_metrics_row(epoch, lr, loss_sum / N, wrong / N, test_error))
        write_metrics()
        if log:
            log(rows[-1])
    checkpoint("final.ckpt", cfg.epochs)
    return TrainResult(rows, checkpoints, monitor)


# ------------------------------------------------------------ gradcheck

GRADCHECK_TOLERANCES = {"classifier": 1e-6, "batchnorm": 1e-5, "dictionary": 1e-3, "lambda1": 1e-3}


def parameter_groups(net):
    """Map group name -> list of registry names.

    Each dictionary and each ``lambda1`` is its own group; all batch-norm
    parameters form one group and the classifier another.
    """
    groups = {}
    for name in net.parameters():
        layer, key = name.split(".", 1)
        if layer.startswith("sc"):
            groups[name] = [name]
        elif layer.startswith("bn"):
            groups.setdefault("batchnorm", []).append(name)
        else:
            groups.setdefault("classifier", []).append(name)
    return groups


def group_kind(group):
    if group.endswith(".D"):
        return "dictionary"
    if group.endswith(".lambda1"):
        return "lambda1"
    return group


@dataclass
class GradcheckReport:
    errors: dict            # group -> max relative error
    probes: dict            # group -> number of parameters compared
    skipped: dict           # group -> probes rejected as not perturbation-stable
    tolerances: dict

    def failures(self):
        return [g for g, e in self.errors.items() if not e <= self.tolerances[g]]

    @property
    def passed(self):
        return not self.failures()

    def lines(self):
        out = []
        for g in self.errors:
            status = "ok" if self.errors[g] <= self.tolerances[g] else "FAIL"
            out.append(f"{g:16s} max_rel_err {self.errors[g]:.3e} tol {self.tolerances[g]:.0e} "
                       f"probes {self.probes[g]} skipped {self.skipped[g]} {status}")
        return out


def gradcheck(net, x, y, samples=200, eps=1e-5, floor=1e-6, seed=0, tolerance=None, max_tries=4):
    """Compare analytic gradients with central finite differences.

    The loss is the mean cross-entropy of a training-mode forward pass
    (batch statistics, no state updates). For each group, up to
    ``samples`` parameters are drawn without replacement. A probe counts
    only if the activity pattern of every sparse-coding layer is the same
    at ``theta``, ``theta + eps`` and ``theta - eps``; otherwise a fresh
    parameter is drawn (at most ``max_tries`` times the quota). Relative
    error is ``|a - n| / max(|a|, |n|, floor)``.

    ``tolerance`` is either a float applied to every group or ``None`` for
    the per-kind defaults in :data:`GRADCHECK_TOLERANCES`.
    """
    rng = np.random.default_rng(seed)
    params = net.parameters()

    def run():
        masks = []

        def look(name, layer, x_in, out):
            if layer.kind == "sc":
                masks.append(np.packbits(out > 0).tobytes())

        logits, caches = net.forward(x, train=True, update_state=False, observer=look)
        loss, grad = softmax_cross_entropy(logits, y)
        return loss, caches, grad, b"|".join(masks)

    loss0, caches, grad, base_sig = run()
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in net.backward(caches, grad).items()}

    errors, probes, skipped, tols = {}, {}, {}, {}
    for group, names in parameter_groups(net).items():
        sizes = [params[n].size for n in names]
        total = sum(sizes)
        quota = min(samples, total)
        order = rng.permutation(total)[:max_tries * quota]
        offsets = np.cumsum([0] + sizes)
        worst, used, rejected = 0.0, 0, 0
        for flat in order:
            if used == quota:
                break
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, i = names[which], int(flat - offsets[which])
            p = params[name].reshape(-1)
            old = p[i]
            p[i] = old + eps
            lp, _, _, sp = run()
            p[i] = old - eps
            lm, _, _, sm = run()
            p[i] = old
            if sp != base_sig or sm != base_sig:
                rejected += 1
                continue
            num = (lp - lm) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
            used += 1
        errors[group] = worst if used else float("nan")
        probes[group], skipped[group] = used, rejected
        tols[group] = float(tolerance) if tolerance is not None else GRADCHECK_TOLERANCES[group_kind(group)]
    return GradcheckReport(errors, probes, skipped, tols)
