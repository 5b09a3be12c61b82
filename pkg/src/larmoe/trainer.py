"""Optimization machinery: AdamW, configuration, checkpoints, and the
stage-2 post-training loop with latent-aligned routing regularization.

Checkpoints are single JSON documents carrying a format version, the stage
tag, every parameter array, the optimizer state, the full configuration,
and the shuffle rng state. Floats serialize through repr and round-trip
bit-exactly, so (train k epochs, checkpoint, train k more) reproduces an
uninterrupted 2k-epoch run to the last bit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import losses
from . import phaseworld
from . import policy as policy_mod
from .diffcore import Node
from .losses import LossWeights

CHECKPOINT_FORMAT_VERSION = 1
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class StageError(RuntimeError):
    """A checkpoint of the wrong pipeline stage was supplied."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt, or of an unknown version."""


@dataclass
class TrainConfig:
    """Every knob of the pipeline; JSON-config files mirror these fields."""

    seed: int = 0
    # data / environment
    horizon: int = 10
    action_dim: int = 3
    obs_dim: int = 8
    task_variants: int = 4
    # architecture
    latent_dim: int = 16
    task_embed_dim: int = 8
    hidden_dim: int = 64
    obs_feature_dim: int = 32
    gate_hidden_dim: int = 32
    n_experts: int = 8
    expert_arch: str = "mlp"
    attn_model_dim: int = 32
    temperature_init: float = 100.0
    # stage 1
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    pretrain_mode: str = "joint"  # or "alternating"
    detach_teacher_latent: bool = True
    # stage 2
    posttrain_epochs: int = 20
    posttrain_lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    clip_norm: float = 10.0  # <= 0 disables clipping
    freeze_student: bool = True   # the +F ablation axis
    regularize: bool = True       # the +R ablation axis
    lambda_dc: float = 1.0
    lambda_h: float = 0.01
    lambda_g: float = 0.01
    group_sigma: float = 1.0
    # evaluation
    eval_seed: int = 9999
    eval_tasks: int = 50
    nmi_rollouts: int = 20
    max_rollout_steps: int = 150
    replan_interval: int = 1

    def __post_init__(self):
        for name in (
            "horizon", "action_dim", "obs_dim", "task_variants", "latent_dim",
            "task_embed_dim", "hidden_dim", "obs_feature_dim", "gate_hidden_dim",
            "n_experts", "attn_model_dim", "pretrain_epochs", "posttrain_epochs",
            "batch_size", "eval_tasks", "nmi_rollouts", "max_rollout_steps",
            "replan_interval",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pretrain_lr", "posttrain_lr", "group_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "lambda_dc", "lambda_h", "lambda_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.expert_arch not in ("mlp", "attention"):
            raise ValueError(f"unknown expert_arch {self.expert_arch!r}")
        if self.pretrain_mode not in ("joint", "alternating"):
            raise ValueError(f"unknown pretrain_mode {self.pretrain_mode!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def loss_weights(self) -> LossWeights:
        """Effective weights; the -R ablation zeroes all three multipliers."""
        if not self.regularize:
            return LossWeights(lambda_dc=0.0, lambda_h=0.0, lambda_g=0.0, sigma=self.group_sigma)
        return LossWeights(
            lambda_dc=self.lambda_dc, lambda_h=self.lambda_h,
            lambda_g=self.lambda_g, sigma=self.group_sigma,
        )


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Update: theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Only registered parameters are ever touched; frozen parameters simply are
    not registered and carry no optimizer state.
    """

    def __init__(self, named_params, lr, weight_decay=0.0):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {n: np.zeros(p.shape) for n, p in self.params}
        self.v = {n: np.zeros(p.shape) for n, p in self.params}

    def zero_grad(self):
        dc.zero_grad([p for _, p in self.params])

    def clip_gradients(self, max_norm) -> float:
        """Global-norm clipping across all registered gradients."""
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        if max_norm is not None and max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self):
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - ADAM_BETA1**t
        bias2 = 1.0 - ADAM_BETA2**t
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros(p.shape)
            grad = grad.reshape(p.shape)
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * grad
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * grad * grad
            m_hat = m / bias1
            v_hat = v / bias2
            p.value = p.value - self.lr * (
                m_hat / (np.sqrt(v_hat) + ADAM_EPS) + self.weight_decay * p.value
            )

    def state_dict(self):
        return {
            "step": self.step_count,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "m": {n: _array_payload(a) for n, a in self.m.items()},
            "v": {n: _array_payload(a) for n, a in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.weight_decay = float(state["weight_decay"])
        for name, _ in self.params:
            self.m[name] = _payload_array(state["m"][name])
            self.v[name] = _payload_array(state["v"][name])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _array_payload(a: np.ndarray):
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _payload_array(payload) -> np.ndarray:
    return np.array(payload["data"], dtype=np.float64).reshape(payload["shape"])


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    params: dict            # name -> ndarray
    optimizer: dict | None  # AdamW.state_dict payload
    config: TrainConfig
    rng_state: dict | None


def save_checkpoint(path, stage, named_params, optimizer, config, rng, epoch):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": stage,
        "epoch": int(epoch),
        "config": config.to_dict(),
        "params": {n: _array_payload(p.value) for n, p in named_params},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    try:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    except OSError as err:
        raise OSError(f"failed writing checkpoint to {path}: {err}") from err
    return str(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint {path}: {err}") from err
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")
    return Checkpoint(
        stage=payload["stage"],
        epoch=int(payload["epoch"]),
        params={n: _payload_array(p) for n, p in payload["params"].items()},
        optimizer=payload["optimizer"],
        config=TrainConfig.from_dict(payload["config"]),
        rng_state=payload["rng"],
    )


def restore_params(named_params, saved: dict):
    for name, node in named_params:
        if name not in saved:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = saved[name]
        if tuple(arr.shape) != tuple(node.shape):
            raise CheckpointError(
                f"parameter {name!r} shape {arr.shape} != expected {node.shape}"
            )
        node.value = arr


def write_csv(path, rows, columns):
    """CSV with repr-format floats so logged values round-trip exactly."""
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in columns))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


# ---------------------------------------------------------------------------
# stage-2 post-training
# ---------------------------------------------------------------------------

POSTTRAIN_LOG_COLUMNS = ["epoch", "L_MSE", "L_DC", "L_H", "L_G", "total", "mean_entropy", "T_value"]


def _mean_entropy(p: np.ndarray) -> float:
    return float(-(p * np.log(p + 1e-12)).sum(axis=-1).mean())


def build_bundle_from_config(config: TrainConfig, student) -> policy_mod.PolicyBundle:
    return policy_mod.build_policy_bundle(
        student,
        n_experts=config.n_experts,
        horizon=config.horizon,
        action_dim=config.action_dim,
        task_variants=config.task_variants,
        obs_dim=config.obs_dim,
        latent_dim=config.latent_dim,
        obs_feature_dim=config.obs_feature_dim,
        task_embed_dim=config.task_embed_dim,
        hidden_dim=config.hidden_dim,
        gate_hidden_dim=config.gate_hidden_dim,
        temperature_init=config.temperature_init,
        expert_arch=config.expert_arch,
        attn_model_dim=config.attn_model_dim,
        freeze_student=config.freeze_student,
        seed=config.seed,
    )


def _student_from_checkpoint(config: TrainConfig, ckpt: Checkpoint):
    from . import nets  # local to keep module surfaces narrow

    widths = [config.obs_dim, config.hidden_dim, config.hidden_dim, config.latent_dim]
    student = nets.init_mlp(widths, seed=0)
    saved = {n[len("student."):]: a for n, a in ckpt.params.items() if n.startswith("student.")}
    restore_params([(n, p) for n, p in student.named_params()], saved)
    return student


def posttrain_loop(
    config: TrainConfig,
    demos,
    pretrain_checkpoint: Checkpoint | None = None,
    resume_checkpoint: Checkpoint | None = None,
    epochs=None,
    checkpoint_path=None,
    log_path=None,
):
    """Train the expert mixture on demonstration chunks.

    Fresh runs take a stage="pretrain" checkpoint supplying the student;
    resumed runs take a stage="posttrain" checkpoint and continue its rng,
    optimizer, and epoch counter. Returns (bundle, per-epoch log rows).
    """
    if not demos:
        raise ValueError("empty dataset")
    epochs = config.posttrain_epochs if epochs is None else int(epochs)

    if resume_checkpoint is not None:
        if resume_checkpoint.stage != "posttrain":
            raise StageError(
                f"resume expects a posttrain checkpoint, got {resume_checkpoint.stage!r}"
            )
        config = resume_checkpoint.config
        student = _student_from_checkpoint(config, resume_checkpoint)
        bundle = build_bundle_from_config(config, student)
        restore_params(bundle.named_params(), resume_checkpoint.params)
        optimizer = AdamW(bundle.trainable_params(), lr=config.posttrain_lr,
                          weight_decay=config.weight_decay)
        optimizer.load_state_dict(resume_checkpoint.optimizer)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_checkpoint.rng_state
        start_epoch = resume_checkpoint.epoch
    else:
        if pretrain_checkpoint is None:
            raise StageError("posttrain_loop needs a pretrain or posttrain checkpoint")
        if pretrain_checkpoint.stage != "pretrain":
            raise StageError(
                f"expected a pretrain checkpoint, got stage {pretrain_checkpoint.stage!r}"
            )
        student = _student_from_checkpoint(config, pretrain_checkpoint)
        bundle = build_bundle_from_config(config, student)
        optimizer = AdamW(bundle.trainable_params(), lr=config.posttrain_lr,
                          weight_decay=config.weight_decay)
        rng = np.random.default_rng([config.seed, 2])
        start_epoch = 0

    data = phaseworld.build_training_arrays(demos, config.horizon)
    if data["chunks"].shape[1] != config.horizon * config.action_dim:
        raise dc.ShapeMismatch(
            "posttrain_loop", data["chunks"].shape, (config.horizon * config.action_dim,)
        )
    weights = config.loss_weights()
    use_reg = weights.lambda_dc > 0 or weights.lambda_h > 0 or weights.lambda_g > 0
    n_samples = data["obs"].shape[0]

    rows = []
    for epoch in range(start_epoch, start_epoch + epochs):
        perm = rng.permutation(n_samples)
        sums = {"mse": 0.0, "dc": 0.0, "h": 0.0, "g": 0.0, "total": 0.0, "entropy": 0.0}
        n_batches = 0
        for lo in range(0, n_samples, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            obs = Node(data["obs"][idx], op="const")
            target = Node(data["chunks"][idx], op="const")
            pred, p, z = policy_mod.policy_forward_batch(bundle, obs, data["task_ids"][idx])
            if use_reg:
                total, comps = losses.total_loss(pred, target, z, p, weights)
                comp_vals = {k: comps[k].item() for k in ("mse", "dc", "h", "g")}
            else:
                total = dc.mse(pred, target)
                comp_vals = {"mse": total.item(), "dc": 0.0, "h": 0.0, "g": 0.0}
            optimizer.zero_grad()
            dc.backward(total)
            optimizer.clip_gradients(config.clip_norm)
            optimizer.step()
            for key in ("mse", "dc", "h", "g"):
                sums[key] += comp_vals[key]
            sums["total"] += total.item()
            sums["entropy"] += _mean_entropy(p.value)
            n_batches += 1
        rows.append({
            "epoch": epoch + 1,
            "L_MSE": sums["mse"] / n_batches,
            "L_DC": sums["dc"] / n_batches,
            "L_H": sums["h"] / n_batches,
            "L_G": sums["g"] / n_batches,
            "total": sums["total"] / n_batches,
            "mean_entropy": sums["entropy"] / n_batches,
            "T_value": float(bundle.gate.temperature.value),
        })

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, "posttrain", bundle.named_params(), optimizer,
            config, rng, start_epoch + epochs,
        )
    if log_path is not None:
        write_csv(log_path, rows, POSTTRAIN_LOG_COLUMNS)
    return bundle, rows
