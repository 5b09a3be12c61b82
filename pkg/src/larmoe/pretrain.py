"""Stage-1 unsupervised co-training of the student, teacher, and latent
decoder.

The teacher encodes the observation together with the future action chunk
and is trained to reconstruct that chunk through a decoder, so its latent
must summarize upcoming motion. The student sees only the observation and
regresses onto the teacher latent. After this stage the student is frozen
and its latent drives expert routing.

This module is fully label-free: it has no code path that touches the
evaluation sidecar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nets
from . import phaseworld
from . import trainer as trainer_mod
from .diffcore import Node

PRETRAIN_LOG_COLUMNS = ["epoch", "L_s", "L_t"]


@dataclass
class RouterBundle:
    """Student and teacher encoders plus the chunk decoder."""

    student: nets.MlpParams
    teacher: nets.MlpParams
    decoder: nets.MlpParams
    latent_dim: int

    def named_params(self):
        return (
            self.student.named_params("student.")
            + self.teacher.named_params("teacher.")
            + self.decoder.named_params("decoder.")
        )


def build_router_bundle(config: trainer_mod.TrainConfig) -> RouterBundle:
    chunk_size = config.horizon * config.action_dim
    h = config.hidden_dim
    streams = [np.random.default_rng([config.seed, 10 + k]) for k in range(3)]
    return RouterBundle(
        student=nets.init_mlp(
            [config.obs_dim, h, h, config.latent_dim], seed=streams[0]
        ),
        teacher=nets.init_mlp(
            [config.obs_dim + chunk_size, h, h, config.latent_dim], seed=streams[1]
        ),
        decoder=nets.init_mlp([config.latent_dim, h, h, chunk_size], seed=streams[2]),
        latent_dim=config.latent_dim,
    )


def _flatten_chunk(chunk) -> Node:
    chunk = dc.as_node(chunk)
    if chunk.ndim == 2 and chunk.shape[0] != 1:
        # a single (H, A) chunk
        return dc.reshape(chunk, (chunk.size,))
    return chunk


def teacher_encode(bundle: RouterBundle, obs, chunk) -> Node:
    """Latent of (observation, action chunk). Accepts a single observation
    with an (H, A) chunk, or batches of rows with flattened chunks."""
    obs = dc.as_node(obs)
    chunk = dc.as_node(chunk)
    if obs.ndim == 1:
        flat = _flatten_chunk(chunk)
        joint = dc.concatenate([obs, flat], axis=0)
    else:
        if chunk.ndim != 2 or chunk.shape[0] != obs.shape[0]:
            raise dc.ShapeMismatch("teacher_encode", obs.shape, chunk.shape)
        joint = dc.concatenate([obs, chunk], axis=1)
    return nets.mlp_forward(bundle.teacher, joint)


def student_encode(bundle: RouterBundle, obs) -> Node:
    """Latent of the observation alone."""
    return nets.mlp_forward(bundle.student, dc.as_node(obs))


def decode_chunk(bundle: RouterBundle, latent) -> Node:
    return nets.mlp_forward(bundle.decoder, latent)


def pretrain_step(
    bundle: RouterBundle,
    obs_batch,
    chunk_batch,
    optimizer: trainer_mod.AdamW,
    detach_latent: bool = True,
    mode: str = "joint",
    step_index: int = 0,
):
    """One co-training update; returns (student loss, teacher loss) values.

    The teacher loss reconstructs the chunk from the teacher latent; the
    student loss regresses the student latent onto the teacher latent,
    detached by default so only the student moves to close that gap. In
    "joint" mode both losses drive a single update; in "alternating" mode
    even steps apply only the teacher loss and odd steps only the student
    loss.
    """
    obs_batch = dc.as_node(obs_batch)
    if obs_batch.size == 0:
        raise ValueError("empty batch")
    z = teacher_encode(bundle, obs_batch, chunk_batch)
    reconstruction = decode_chunk(bundle, z)
    loss_teacher = dc.mse(reconstruction, chunk_batch)
    target = z.detach() if detach_latent else z
    loss_student = dc.mse(student_encode(bundle, obs_batch), target)

    if mode == "joint":
        objective = dc.add(loss_student, loss_teacher)
    elif mode == "alternating":
        objective = loss_teacher if step_index % 2 == 0 else loss_student
    else:
        raise ValueError(f"unknown pretrain mode {mode!r}")

    optimizer.zero_grad()
    dc.backward(objective)
    optimizer.step()
    return loss_student.item(), loss_teacher.item()


def pretrain_loop(
    config: trainer_mod.TrainConfig,
    demos,
    resume_checkpoint: trainer_mod.Checkpoint | None = None,
    epochs=None,
    checkpoint_path=None,
    log_path=None,
):
    """Run stage 1 over shuffled chunk views of the demonstrations.

    Returns (RouterBundle, per-epoch rows with mean L_s / L_t). Saves a
    stage="pretrain" checkpoint when a path is given.
    """
    if not demos:
        raise ValueError("empty dataset")
    epochs = config.pretrain_epochs if epochs is None else int(epochs)

    if resume_checkpoint is not None:
        if resume_checkpoint.stage != "pretrain":
            raise trainer_mod.StageError(
                f"resume expects a pretrain checkpoint, got {resume_checkpoint.stage!r}"
            )
        config = resume_checkpoint.config
        bundle = build_router_bundle(config)
        trainer_mod.restore_params(bundle.named_params(), resume_checkpoint.params)
        optimizer = trainer_mod.AdamW(
            bundle.named_params(), lr=config.pretrain_lr, weight_decay=config.weight_decay
        )
        optimizer.load_state_dict(resume_checkpoint.optimizer)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_checkpoint.rng_state
        start_epoch = resume_checkpoint.epoch
    else:
        bundle = build_router_bundle(config)
        optimizer = trainer_mod.AdamW(
            bundle.named_params(), lr=config.pretrain_lr, weight_decay=config.weight_decay
        )
        rng = np.random.default_rng([config.seed, 1])
        start_epoch = 0

    data = phaseworld.build_training_arrays(demos, config.horizon)
    n_samples = data["obs"].shape[0]

    rows = []
    step_index = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        perm = rng.permutation(n_samples)
        sum_s = sum_t = 0.0
        n_batches = 0
        for lo in range(0, n_samples, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            loss_s, loss_t = pretrain_step(
                bundle,
                Node(data["obs"][idx], op="const"),
                Node(data["chunks"][idx], op="const"),
                optimizer,
                detach_latent=config.detach_teacher_latent,
                mode=config.pretrain_mode,
                step_index=step_index,
            )
            sum_s += loss_s
            sum_t += loss_t
            n_batches += 1
            step_index += 1
        rows.append({"epoch": epoch + 1, "L_s": sum_s / n_batches, "L_t": sum_t / n_batches})

    if checkpoint_path is not None:
        trainer_mod.save_checkpoint(
            checkpoint_path, "pretrain", bundle.named_params(), optimizer,
            config, rng, start_epoch + epochs,
        )
    if log_path is not None:
        trainer_mod.write_csv(log_path, rows, PRETRAIN_LOG_COLUMNS)
    return bundle, rows
