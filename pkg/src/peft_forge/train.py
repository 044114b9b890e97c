"""Deterministic adapter-only training on a small ReLU network.

The model is a stack of frozen base matrices, each optionally carrying a
:class:`~peft_forge.lora.LoraAdapter`, with a rectifier between layers.
Samples are columns inside a batch; datasets store them as rows.

Loss is mean squared error over every output entry. Only adapter
parameters receive updates. The learning rate ramps linearly from 0 at
step 0 to ``learning_rate`` at ``warmup_steps`` and stays constant after.
The global gradient norm is clipped to ``gradient_clip_val`` only when it
exceeds that value, so an unclipped step is bitwise identical to a step
with clipping disabled.

When a layer carries a pruning mask, its effective weight is
``(W0 + (alpha/r) B A) * M`` on every use, so masked positions of the
effective weight stay exactly zero after each update.
"""

from __future__ import annotations

import configparser
import io
import logging
import math
import re
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import lora
from .errors import FormatError, NumericError, ParameterError, ShapeError
from .numerics import SeededRng, as_matrix, checksum, gaussian_matrix
from .prune import PruneMask, PrunePlan, compute_masks
from .quant import QuantizedTensor, quantize

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# config-file key -> TrainConfig attribute, in the reference hyperparameter order
HYPERPARAMETER_KEYS = {
    "MAX LENGTH": "max_length",
    "MODEL": "model",
    "USE_QLORA": "use_qlora",
    "batch_size": "batch_size",
    "lora_r": "lora_rank",
    "lora_alpha": "lora_alpha",
    "max_epochs": "max_epochs",
    "val_check_interval": "val_check_interval",
    "check_val_every_n_epoch": "check_val_every_n_epoch",
    "gradient_clip_val": "gradient_clip_val",
    "accumulate_grad_batches": "accumulate_grad_batches",
    "learning_rate": "learning_rate",
    "num_nodes": "num_nodes",
    "warmup_steps": "warmup_steps",
}


@dataclass
class TrainConfig:
    # reference fine-tuning hyperparameters
    max_length: int = 400
    model: str = "LLaVA-NeXT-Video-7B-hf"
    use_qlora: bool = True
    qlora_bits: int = 4
    batch_size: int = 2
    lora_rank: int = 64
    lora_alpha: float = 128.0
    max_epochs: int = 1
    val_check_interval: float = 0.2
    check_val_every_n_epoch: int = 1
    gradient_clip_val: float = 1.0
    accumulate_grad_batches: int = 1
    learning_rate: float = 1e-4
    num_nodes: int = 1
    warmup_steps: int = 50
    # desk-scale settings
    seed: int = 0
    optimizer: str = "adam"
    init_stddev: float = lora.DEFAULT_INIT_STDDEV
    lora_targets: str = "all"
    quant_block_size: int = 0
    prune_sparsity: float = 0.0
    prune_mode: str = "global"
    prune_order: str = "after"

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.accumulate_grad_batches < 1:
            raise ParameterError("batch_size, max_epochs and accumulate_grad_batches must be >= 1")
        if not 0 < self.val_check_interval <= 1:
            raise ParameterError(f"val_check_interval must be in (0, 1], got {self.val_check_interval}")
        if self.learning_rate < 0 or self.warmup_steps < 0 or self.gradient_clip_val < 0:
            raise ParameterError("learning_rate, warmup_steps and gradient_clip_val must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.prune_order not in ("before", "after"):
            raise ParameterError(f"prune_order must be 'before' or 'after', got {self.prune_order!r}")
        if self.use_qlora and self.qlora_bits not in (4, 8):
            raise ParameterError(f"qlora bits must be 4 or 8, got {self.qlora_bits}")

    def target_layers(self, n_layers: int) -> list[int]:
        if self.lora_targets.strip() == "all":
            return list(range(n_layers))
        if not self.lora_targets.strip():
            return []
        idx = sorted({int(t) for t in self.lora_targets.split(",")})
        if idx and not 0 <= idx[0] <= idx[-1] < n_layers:
            raise ParameterError(f"lora_targets {self.lora_targets!r} out of range for {n_layers} layers")
        return idx

    # ---- config file -------------------------------------------------
    def dumps(self) -> str:
        cp = _parser()
        cp["hyperparameters"] = {}
        for key, attr in HYPERPARAMETER_KEYS.items():
            cp["hyperparameters"][key] = _fmt(self, attr)
        cp["desk"] = {}
        table_attrs = set(HYPERPARAMETER_KEYS.values()) | {"qlora_bits"}
        for f in fields(self):
            if f.name not in table_attrs:
                cp["desk"][f.name] = _fmt(self, f.name)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        cp = _parser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise FormatError(f"config file is not valid key/value text: {exc}") from exc
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for section, mapping in (("hyperparameters", HYPERPARAMETER_KEYS), ("desk", None)):
            if not cp.has_section(section):
                continue
            for key, raw in cp[section].items():
                attr = mapping.get(key) if mapping is not None else key
                if attr is None or attr not in kinds:
                    raise FormatError(f"unknown config key {key!r} in [{section}]")
                if attr == "use_qlora":
                    values["use_qlora"], bits = _parse_qlora(raw)
                    if bits is not None:
                        values["qlora_bits"] = bits
                else:
                    values[attr] = _parse_value(kinds[attr], raw, key)
        return cls(**values)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    return cp


def _fmt(cfg: TrainConfig, attr: str) -> str:
    v = getattr(cfg, attr)
    if attr == "use_qlora":
        return f"True ({cfg.qlora_bits}-Bit)" if v else "False"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_qlora(raw: str) -> tuple[bool, int | None]:
    m = re.fullmatch(r"\s*(True|False)\s*(?:\((\d+)-Bit\))?\s*", raw)
    if not m:
        raise FormatError(f"USE_QLORA must look like 'True (4-Bit)' or 'False', got {raw!r}")
    return m.group(1) == "True", int(m.group(2)) if m.group(2) else None


def _parse_value(kind, raw: str, key: str):
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            if raw not in ("True", "False"):
                raise ValueError(raw)
            return raw == "True"
        return raw
    except ValueError as exc:
        raise FormatError(f"bad value {raw!r} for config key {key!r}") from exc


# ---- model -----------------------------------------------------------------

@dataclass(eq=False)
class Layer:
    base: np.ndarray | QuantizedTensor
    adapter: lora.LoraAdapter | None = None
    mask: PruneMask | None = None

    def base_dense(self) -> np.ndarray:
        return self.adapter.base_matrix() if self.adapter else _dense(self.base)

    def effective_weight(self) -> np.ndarray:
        w = lora.merge(self.adapter) if self.adapter else _dense(self.base)
        return w * self.mask.mask if self.mask is not None else w

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.mask is not None:
            return self.effective_weight() @ x
        if self.adapter is not None:
            return lora.forward(self.adapter, x)
        return _dense(self.base) @ x


def _dense(base) -> np.ndarray:
    from .quant import dequantize
    return dequantize(base) if isinstance(base, QuantizedTensor) else base


@dataclass(eq=False)
class ToyModel:
    layers: list

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        z = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer.apply(z)
            if cache is not None:
                cache.append((z, h))
            z = np.maximum(h, 0.0) if i < last else h
        return z

    def adapters(self) -> list:
        return [l.adapter for l in self.layers if l.adapter is not None]

    def base_checksums(self) -> list[str]:
        out = []
        for l in self.layers:
            if l.adapter is not None:
                out.append(l.adapter.base_checksum())
            elif isinstance(l.base, QuantizedTensor):
                out.append(checksum(l.base.codes.astype(np.float64)))
            else:
                out.append(checksum(l.base))
        return out

    def adapter_checksums(self) -> list[str]:
        return [checksum(ad.a) + checksum(ad.b) for ad in self.adapters()]


def build_model(bases: list, cfg: TrainConfig, rng: SeededRng | None = None) -> ToyModel:
    """Wrap pretrained ``bases`` into a model with adapters on ``cfg.lora_targets``."""
    rng = rng or SeededRng(cfg.seed)
    targets = set(cfg.target_layers(len(bases)))
    layers = []
    for i, w in enumerate(bases):
        w = as_matrix(w)
        if i > 0 and w.shape[1] != layers[-1].base_dense().shape[0]:
            raise ShapeError(f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                             f"{layers[-1].base_dense().shape[0]}")
        base = quantize(w, cfg.qlora_bits, cfg.quant_block_size) if cfg.use_qlora else w
        ad = None
        if i in targets:
            ad = lora.init_adapter(rng, base, cfg.lora_rank, cfg.lora_alpha, cfg.init_stddev)
        layers.append(Layer(base=base, adapter=ad))
    if cfg.prune_order == "before" and cfg.prune_sparsity > 0:
        attach_masks(ToyModel(layers), PrunePlan(cfg.prune_sparsity, cfg.prune_mode))
    return ToyModel(layers)


def layer_ids(model: ToyModel) -> list[str]:
    return [f"layer{i}" for i in range(len(model.layers))]


def attach_masks(model: ToyModel, plan: PrunePlan) -> dict:
    """Compute masks from the current effective weights and attach them."""
    ids = layer_ids(model)
    weights = {lid: l.effective_weight() for lid, l in zip(ids, model.layers)}
    masks = compute_masks(weights, plan)
    for lid, layer in zip(ids, model.layers):
        layer.mask = masks[lid]
    return masks


# ---- data ------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray  # (n, k)
    targets: np.ndarray  # (n, d)

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs)
        self.targets = as_matrix(self.targets)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets")

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx].T.copy(), self.targets[idx].T.copy()


@dataclass(eq=False)
class TeacherTask:
    bases: list
    teacher: list
    train: Dataset
    val: Dataset


def make_teacher_task(seed: int, dims=(16, 16, 16), n_train: int = 1000, n_val: int = 200,
                      teacher_rank: int = 2, delta_scale: float = 0.5) -> TeacherTask:
    """Synthetic regression task that low-rank adapters can learn.

    Student bases are random ``W0`` with entries of std ``1/sqrt(k)``; the hidden
    teacher uses ``W0 + U V`` with a random rank-``teacher_rank`` perturbation
    per layer whose entries have std ``delta_scale/sqrt(k)``. Targets are the
    teacher network's outputs on standard-normal inputs.
    """
    rng = SeededRng(seed)
    bases, teacher = [], []
    for k, d in zip(dims[:-1], dims[1:]):
        w0 = gaussian_matrix(rng, d, k, 1.0 / math.sqrt(k))
        u = gaussian_matrix(rng, d, teacher_rank, 1.0)
        v = gaussian_matrix(rng, teacher_rank, k, 1.0)
        delta = (u @ v) * (delta_scale / math.sqrt(k * teacher_rank))
        bases.append(w0)
        teacher.append(w0 + delta)
    teacher_model = ToyModel([Layer(base=w) for w in teacher])

    def sample(n):
        x = rng.normal(n * dims[0]).reshape(n, dims[0])
        y = teacher_model.forward(x.T).T
        return Dataset(x, y)

    return TeacherTask(bases=bases, teacher=teacher, train=sample(n_train), val=sample(n_val))


# ---- loss and gradients -------------------------------------------------------

def mse(y: np.ndarray, t: np.ndarray) -> float:
    diff = y - t
    return float(np.mean(diff * diff))


def compute_gradients(model: ToyModel, x: np.ndarray, t: np.ndarray) -> tuple[float, dict]:
    """Loss and ``{layer index: AdapterGradients}`` for one batch (columns are samples)."""
    cache: list = []
    y = model.forward(x, cache)
    if y.shape != t.shape:
        raise ShapeError(f"model output {y.shape} does not match targets {t.shape}")
    diff = y - t
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        # callers raise with step context; backprop of non-finite values is meaningless
        return loss, {}
    g = 2.0 * diff / diff.size
    grads = {}
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        z, h = cache[i]
        if i < last:
            g = g * (h > 0.0)
        ad = layer.adapter
        if ad is not None:
            if layer.mask is not None:
                dw = (g @ z.T) * layer.mask.mask
                s = ad.scaling
                grads[i] = lora.AdapterGradients(grad_a=s * (ad.b.T @ dw), grad_b=s * (dw @ ad.a.T))
            else:
                grads[i] = lora.backward(ad, z, g)
        if i > 0:
            if layer.mask is not None:
                g = layer.effective_weight().T @ g
            elif ad is not None:
                g = lora.input_grad(ad, g)
            else:
                g = _dense(layer.base).T @ g
    return loss, grads


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(gr.norm_sq() for gr in grads.values()))


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds ``max_norm``.

    ``max_norm == 0`` disables clipping. Returns the (possibly new) gradients and
    the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        grads = {i: lora.AdapterGradients(gr.grad_a * f, gr.grad_b * f) for i, gr in grads.items()}
    return grads, norm


def warmup_lr(cfg: TrainConfig, step_index: int) -> float:
    if cfg.warmup_steps > 0 and step_index < cfg.warmup_steps:
        return cfg.learning_rate * (step_index / cfg.warmup_steps)
    return cfg.learning_rate


class Optimizer:
    """Adam (0.9 / 0.999 / 1e-8) or plain gradient descent over adapter matrices."""

    def __init__(self, kind: str = "adam"):
        self.kind = kind
        self.t = 0
        self.state: dict = {}

    def step(self, model: ToyModel, grads: dict, lr: float) -> None:
        self.t += 1
        for i, gr in grads.items():
            ad = model.layers[i].adapter
            ad.a = self._update(("a", i), ad.a, gr.grad_a, lr)
            ad.b = self._update(("b", i), ad.b, gr.grad_b, lr)

    def _update(self, key, p: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        if self.kind == "sgd":
            return p - lr * g
        m, v = self.state.get(key, (np.zeros_like(p), np.zeros_like(p)))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        self.state[key] = (m, v)
        m_hat = m / (1.0 - ADAM_BETA1 ** self.t)
        v_hat = v / (1.0 - ADAM_BETA2 ** self.t)
        return p - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS))


def _apply(model, grads, cfg, step_index, optimizer) -> None:
    grads, _ = clip_gradients(grads, cfg.gradient_clip_val)
    optimizer.step(model, grads, warmup_lr(cfg, step_index))


def train_step(model: ToyModel, batch, cfg: TrainConfig, step_index: int,
               optimizer: Optimizer | None = None) -> float:
    """One optimizer step on ``batch = (inputs, targets)``; returns the pre-update loss."""
    if step_index < 0:
        raise ParameterError(f"step_index must be >= 0, got {step_index}")
    x, t = batch
    loss, grads = compute_gradients(model, x, t)
    if not math.isfinite(loss):
        raise NumericError(f"loss diverged to {loss} at step {step_index}")
    _apply(model, grads, cfg, step_index, optimizer or Optimizer(cfg.optimizer))
    return loss


def evaluate_loss(model: ToyModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    y = model.forward(dataset.inputs.T)
    return mse(y, dataset.targets.T)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    trainable_params: int = 0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "losses": self.losses,
            "val_steps": self.val_steps,
            "val_losses": self.val_losses,
            "steps": self.steps,
            "trainable_params": self.trainable_params,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


def train_loop(model: ToyModel, dataset: Dataset, cfg: TrainConfig,
               val_dataset: Dataset | None = None, max_steps: int | None = None,
               on_step=None) -> TrainReport:
    """Run ``cfg.max_epochs`` passes over ``dataset`` in seeded shuffled order.

    Validation uses ``val_dataset`` (the training set when omitted) every
    ``floor(val_check_interval * steps_per_epoch)`` optimizer steps.
    ``on_step(step_index, model)`` is called after every optimizer step.
    """
    n = len(dataset)
    if n == 0:
        raise ParameterError("cannot train on an empty dataset")
    val_dataset = val_dataset or dataset
    batches_per_epoch = -(-n // cfg.batch_size)
    steps_per_epoch = -(-batches_per_epoch // cfg.accumulate_grad_batches)
    val_every = max(1, math.floor(cfg.val_check_interval * steps_per_epoch))
    order_rng = SeededRng((cfg.seed ^ 0xD1B54A32D192ED03) & (2**64 - 1))
    optimizer = Optimizer(cfg.optimizer)
    report = TrainReport(trainable_params=lora.trainable_param_count(model.adapters()))
    started = time.perf_counter()
    step = 0
    for epoch in range(cfg.max_epochs):
        perm = order_rng.permutation(n)
        pending: dict = {}
        pending_count = 0
        pending_losses = []
        for b in range(batches_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = compute_gradients(model, *dataset.batch(idx))
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged to {loss} at epoch {epoch}, step {step}")
            pending_losses.append(loss)
            for i, gr in grads.items():
                if i in pending:
                    pending[i] = lora.AdapterGradients(pending[i].grad_a + gr.grad_a, pending[i].grad_b + gr.grad_b)
                else:
                    pending[i] = gr
            pending_count += 1
            if pending_count < cfg.accumulate_grad_batches and b < batches_per_epoch - 1:
                continue
            if pending_count > 1:
                pending = {i: lora.AdapterGradients(gr.grad_a / pending_count, gr.grad_b / pending_count)
                           for i, gr in pending.items()}
            _apply(model, pending, cfg, step, optimizer)
            report.losses.append(float(np.mean(pending_losses)))
            pending, pending_count, pending_losses = {}, 0, []
            if on_step is not None:
                on_step(step, model)
            step += 1
            if (epoch + 1) % cfg.check_val_every_n_epoch == 0 and step % val_every == 0:
                report.val_steps.append(step)
                report.val_losses.append(evaluate_loss(model, val_dataset))
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break
    report.steps = step
    report.wall_time = time.perf_counter() - started
    log.info("trained %d steps in %.2fs, final loss %.6g", step, report.wall_time,
             report.losses[-1] if report.losses else float("nan"))
    return report
