"""Soft mixture-of-experts policy gated by the pretrained student latent.

A forward pass runs the (usually frozen) student encoder on the observation,
maps the latent through the gate MLP, scales by the learnable temperature,
and softmaxes into a routing distribution over the N experts. Every expert
consumes the same context vector (observation features concatenated with the
task embedding) and the final action chunk is the routing-weighted average
of all expert chunks. Gating is dense: every expert runs and receives
gradient on every step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nets
from .diffcore import Node


@dataclass
class PolicyBundle:
    """All stage-2 parameters plus the student carried over from stage 1."""

    student: nets.MlpParams
    student_frozen: bool
    obs_encoder: nets.MlpParams
    task_table: nets.TaskEmbeddingTable
    gate: nets.GateParams
    experts: list
    expert_arch: str
    horizon: int
    action_dim: int

    def named_params(self):
        out = self.student.named_params("student.")
        out += self.obs_encoder.named_params("encoder.")
        out += self.task_table.named_params("task_table.")
        out += self.gate.named_params("gate.")
        for i, expert in enumerate(self.experts):
            out += expert.named_params(f"expert{i}.")
        return out

    def trainable_params(self):
        """Parameters the optimizer may update; excludes a frozen student."""
        if self.student_frozen:
            return [(n, p) for n, p in self.named_params() if not n.startswith("student.")]
        return self.named_params()

    @property
    def n_experts(self):
        return len(self.experts)


def build_policy_bundle(
    student: nets.MlpParams,
    *,
    n_experts,
    horizon,
    action_dim,
    task_variants,
    obs_dim=8,
    latent_dim=None,
    obs_feature_dim=32,
    task_embed_dim=8,
    hidden_dim=64,
    gate_hidden_dim=32,
    temperature_init=100.0,
    expert_arch="mlp",
    attn_model_dim=32,
    freeze_student=True,
    seed=0,
) -> PolicyBundle:
    """Assemble a policy around an existing student encoder.

    Component initializers draw from independent streams derived from
    `seed`, so the bundle is deterministic but components are decorrelated.
    """
    if n_experts < 1:
        raise ValueError(f"need at least one expert, got {n_experts}")
    latent_dim = latent_dim if latent_dim is not None else student.widths[-1]
    if student.widths[-1] != latent_dim:
        raise dc.ShapeMismatch("build_policy_bundle", (student.widths[-1],), (latent_dim,))
    context_dim = obs_feature_dim + task_embed_dim
    streams = [np.random.default_rng([seed, k]) for k in range(3 + n_experts)]

    encoder = nets.init_mlp([obs_dim, hidden_dim, obs_feature_dim], seed=streams[0])
    table = nets.init_task_table(task_variants, task_embed_dim, seed=streams[1])
    gate = nets.init_gate(
        latent_dim, n_experts, hidden=gate_hidden_dim,
        temperature_init=temperature_init, seed=streams[2],
    )
    experts = []
    for i in range(n_experts):
        if expert_arch == "mlp":
            experts.append(
                nets.init_mlp([context_dim, hidden_dim, horizon * action_dim], seed=streams[3 + i])
            )
        elif expert_arch == "attention":
            experts.append(
                nets.init_decoder_expert(
                    context_dim, horizon, action_dim, model_dim=attn_model_dim, seed=streams[3 + i]
                )
            )
        else:
            raise ValueError(f"unknown expert architecture {expert_arch!r}")
    return PolicyBundle(
        student=student,
        student_frozen=freeze_student,
        obs_encoder=encoder,
        task_table=table,
        gate=gate,
        experts=experts,
        expert_arch=expert_arch,
        horizon=horizon,
        action_dim=action_dim,
    )


def route(bundle: PolicyBundle, obs):
    """Observation -> (student latent, routing distribution).

    p = softmax(T * gate(latent)); rows land on the simplex by construction,
    asserted here in debug runs.
    """
    z = nets.mlp_forward(bundle.student, obs)
    logits = nets.mlp_forward(bundle.gate.mlp, z)
    p = dc.softmax(dc.multiply(bundle.gate.temperature, logits))
    assert p.value.min() >= 0.0 and np.abs(p.value.sum(axis=-1) - 1.0).max() <= 1e-9
    return z, p


def build_context(bundle: PolicyBundle, obs, task_ids) -> Node:
    """Concatenate observation features with the task embedding."""
    obs = dc.as_node(obs)
    single = obs.ndim == 1
    features = nets.mlp_forward(bundle.obs_encoder, obs)
    if single:
        features = dc.reshape(features, (1, features.size))
    emb = bundle.task_table.lookup(task_ids)
    ctx = dc.concatenate([features, emb], axis=1)
    if single:
        return dc.reshape(ctx, (ctx.shape[-1],))
    return ctx


def _expert_forward(bundle: PolicyBundle, index: int, context) -> Node:
    expert = bundle.experts[index]
    if bundle.expert_arch == "mlp":
        out = nets.mlp_forward(expert, context)
        if out.ndim == 1:
            return dc.reshape(out, (bundle.horizon, bundle.action_dim))
        return out
    return nets.decoder_expert_forward(expert, context)


def mix_actions(chunks, p) -> Node:
    """Convex combination of expert chunks under the routing weights.

    `chunks` is a list of N equally-shaped Nodes; `p` is a length-N vector
    (single step) or a (B, N) batch matching chunks of shape (B, ...).
    """
    p = dc.as_node(p)
    n = p.shape[-1]
    if len(chunks) != n:
        raise dc.ShapeMismatch("mix_actions", (len(chunks),), (n,))
    shape0 = chunks[0].shape
    for c in chunks[1:]:
        if c.shape != shape0:
            raise dc.ShapeMismatch("mix_actions", shape0, c.shape)
    mixed = None
    for i, chunk in enumerate(chunks):
        if p.ndim == 1:
            weight = dc.narrow(p, (slice(i, i + 1),))
        else:
            weight = dc.narrow(p, (slice(None), slice(i, i + 1)))
        term = dc.multiply(weight, chunk)
        mixed = term if mixed is None else dc.add(mixed, term)
    return mixed


def policy_forward(bundle: PolicyBundle, obs, task_id):
    """Single-step forward: returns (action chunk (H, A), routing p, latent z),
    all as Nodes, for one observation vector."""
    z, p = route(bundle, obs)
    ctx = build_context(bundle, obs, task_id)
    chunks = [_expert_forward(bundle, i, ctx) for i in range(bundle.n_experts)]
    return mix_actions(chunks, p), p, z


def policy_forward_batch(bundle: PolicyBundle, obs, task_ids):
    """Batched forward: (B, 8) observations and (B,) task ids to
    (B, H*A) predicted chunks, (B, N) routing rows, (B, d_z) latents."""
    z, p = route(bundle, obs)
    ctx = build_context(bundle, obs, task_ids)
    chunks = [_expert_forward(bundle, i, ctx) for i in range(bundle.n_experts)]
    return mix_actions(chunks, p), p, z


def params_digest(named_params) -> str:
    """Stable hash of parameter values; used to prove the student stays
    bit-identical under the freeze contract."""
    h = hashlib.sha256()
    for name, node in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(node.value).tobytes())
    return h.hexdigest()
