"""Parameterized function approximators built on diffcore.

Provides plain MLPs (used for the student/teacher encoders, the latent
decoder, the observation encoder, and the default experts), the gating head
with its learnable temperature, a learned task-embedding table, and a
minimal single-block cross-attention action decoder as the optional expert
architecture.

All initializers draw weights uniform in +/- sqrt(6 / (fan_in + fan_out))
with zero biases and are deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node


class UnknownTaskId(KeyError):
    """Raised when a task-embedding lookup sees an id outside the table."""


def _rng_of(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"widths must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out) if shape is None else shape)


_ACTIVATIONS = {"tanh": dc.tanh, "relu": dc.relu}


@dataclass
class MlpParams:
    """Weights, biases, and activation tag of a feed-forward stack."""

    weights: list
    biases: list
    activation: str
    widths: list

    def named_params(self, prefix=""):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}w{i}", w))
            out.append((f"{prefix}b{i}", b))
        return out


def init_mlp(widths, activation="tanh", seed=0) -> MlpParams:
    """Build an MLP with the given layer widths.

    Weights are Glorot-uniform, biases zero. `widths` of length L+1 gives L
    affine layers; every layer but the last is followed by the activation.
    """
    widths = [int(w) for w in widths]
    if any(w <= 0 for w in widths):
        raise ValueError(f"widths must be positive, got {widths}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = _rng_of(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(Node(glorot_uniform(rng, fan_in, fan_out)))
        biases.append(Node(np.zeros(fan_out)))
    return MlpParams(weights=weights, biases=biases, activation=activation, widths=widths)


def mlp_forward(params: MlpParams, x) -> Node:
    """Alternating affine + activation; the final layer is affine only.

    `x` may be a single vector or a batch (rows are samples). The last-axis
    width must match the first layer input width.
    """
    x = dc.as_node(x)
    single = x.ndim == 1
    if single:
        x = dc.reshape(x, (1, x.size))
    if x.shape[-1] != params.widths[0]:
        raise dc.ShapeMismatch("mlp_forward", x.shape, (params.widths[0],))
    act = _ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = dc.add(dc.matmul(h, w), b)
        if i != last:
            h = act(h)
    if single:
        h = dc.reshape(h, (h.shape[-1],))
    return h


@dataclass
class GateParams:
    """Routing head: an MLP from the latent to expert logits, and a learnable
    softmax temperature stored as a free (unconstrained) scalar."""

    mlp: MlpParams
    temperature: Node

    def named_params(self, prefix="gate."):
        return self.mlp.named_params(prefix) + [(f"{prefix}T", self.temperature)]


def init_gate(latent_dim, n_experts, hidden=32, temperature_init=100.0, seed=0) -> GateParams:
    mlp = init_mlp([latent_dim, hidden, n_experts], activation="tanh", seed=seed)
    return GateParams(mlp=mlp, temperature=Node(np.asarray(float(temperature_init))))


@dataclass
class TaskEmbeddingTable:
    """One learned vector per task-variant id."""

    table: Node
    n_tasks: int
    dim: int

    def named_params(self, prefix="task_table."):
        return [(f"{prefix}emb", self.table)]

    def lookup(self, task_ids) -> Node:
        """Rows of the table for integer ids; raises UnknownTaskId for ids
        outside [0, n_tasks)."""
        ids = np.atleast_1d(np.asarray(task_ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_tasks):
            bad = ids[(ids < 0) | (ids >= self.n_tasks)][0]
            raise UnknownTaskId(f"task id {int(bad)} not in table of size {self.n_tasks}")
        onehot = np.zeros((ids.size, self.n_tasks))
        onehot[np.arange(ids.size), ids] = 1.0
        return dc.matmul(Node(onehot, op="const"), self.table)


def init_task_table(n_tasks, dim, seed=0) -> TaskEmbeddingTable:
    if n_tasks <= 0 or dim <= 0:
        raise ValueError(f"table dims must be positive, got {n_tasks}x{dim}")
    rng = _rng_of(seed)
    return TaskEmbeddingTable(
        table=Node(glorot_uniform(rng, n_tasks, dim)), n_tasks=n_tasks, dim=dim
    )


# ---------------------------------------------------------------------------
# minimal cross-attention action decoder (optional expert architecture)
# ---------------------------------------------------------------------------

@dataclass
class DecoderExpertParams:
    """H learned query tokens cross-attending to a single context token.

    One attention block (query/key/value/output projections), one
    feed-forward sublayer, and a final projection to the action dimension.
    With a 1-token memory the attention weights are identically 1, so the
    attended value is the value projection itself; the query projection is
    kept for the scores diagnostic but receives no gradient.
    """

    queries: Node
    wq: Node
    wk: Node
    bk: Node
    wv: Node
    bv: Node
    wo: Node
    bo: Node
    ff_w1: Node
    ff_b1: Node
    ff_w2: Node
    ff_b2: Node
    w_out: Node
    b_out: Node
    horizon: int
    model_dim: int
    context_dim: int
    action_dim: int

    def named_params(self, prefix=""):
        names = [
            "queries", "wq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ff_w1", "ff_b1", "ff_w2", "ff_b2", "w_out", "b_out",
        ]
        return [(prefix + n, getattr(self, n)) for n in names]


def init_decoder_expert(context_dim, horizon, action_dim, model_dim=32, seed=0) -> DecoderExpertParams:
    if min(context_dim, horizon, action_dim, model_dim) <= 0:
        raise ValueError("decoder expert dims must be positive")
    rng = _rng_of(seed)
    return DecoderExpertParams(
        queries=Node(glorot_uniform(rng, horizon, model_dim)),
        wq=Node(glorot_uniform(rng, model_dim, model_dim)),
        wk=Node(glorot_uniform(rng, context_dim, model_dim)),
        bk=Node(np.zeros(model_dim)),
        wv=Node(glorot_uniform(rng, context_dim, model_dim)),
        bv=Node(np.zeros(model_dim)),
        wo=Node(glorot_uniform(rng, model_dim, model_dim)),
        bo=Node(np.zeros(model_dim)),
        ff_w1=Node(glorot_uniform(rng, model_dim, 2 * model_dim)),
        ff_b1=Node(np.zeros(2 * model_dim)),
        ff_w2=Node(glorot_uniform(rng, 2 * model_dim, model_dim)),
        ff_b2=Node(np.zeros(model_dim)),
        w_out=Node(glorot_uniform(rng, model_dim, action_dim)),
        b_out=Node(np.zeros(action_dim)),
        horizon=horizon,
        model_dim=model_dim,
        context_dim=context_dim,
        action_dim=action_dim,
    )


def attention_weights(params: DecoderExpertParams, context) -> Node:
    """Softmax attention scores of the H queries over the single context
    token: an (H, 1) matrix that is exactly all ones."""
    ctx = dc.as_node(context)
    if ctx.ndim == 1:
        ctx = dc.reshape(ctx, (1, ctx.size))
    if ctx.shape != (1, params.context_dim):
        raise dc.ShapeMismatch("attention_weights", ctx.shape, (1, params.context_dim))
    k = dc.add(dc.matmul(ctx, params.wk), params.bk)
    q = dc.matmul(params.queries, params.wq)
    scores = dc.scalar_multiply(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(params.model_dim))
    return dc.softmax(scores)


def _rows_matmul(x: Node, w: Node, b: Node | None = None) -> Node:
    """(B, H, d) @ (d, e) via a flatten/unflatten round trip."""
    bsz, h, d = x.shape
    flat = dc.matmul(dc.reshape(x, (bsz * h, d)), w)
    if b is not None:
        flat = dc.add(flat, b)
    return dc.reshape(flat, (bsz, h, w.shape[1]))


def decoder_expert_forward(params: DecoderExpertParams, context) -> Node:
    """Decode an action chunk from a context vector.

    For a (d_c,) context returns an (H, A) chunk; for a (B, d_c) batch
    returns (B, H*A). Attention over the 1-token memory is identically 1,
    so each query attends to the value projection of the context.
    """
    ctx = dc.as_node(context)
    single = ctx.ndim == 1
    if single:
        ctx = dc.reshape(ctx, (1, ctx.size))
    if ctx.shape[-1] != params.context_dim:
        raise dc.ShapeMismatch("decoder_expert_forward", ctx.shape, (params.context_dim,))
    bsz = ctx.shape[0]
    h_tok, d_m = params.horizon, params.model_dim

    v = dc.add(dc.matmul(ctx, params.wv), params.bv)
    attended = dc.multiply(
        dc.reshape(v, (bsz, 1, d_m)), Node(np.ones((1, h_tok, 1)), op="const")
    )
    h = dc.add(_rows_matmul(attended, params.wo, params.bo), params.queries)
    ff = _rows_matmul(dc.relu(_rows_matmul(h, params.ff_w1, params.ff_b1)), params.ff_w2, params.ff_b2)
    h = dc.add(h, ff)
    out = _rows_matmul(h, params.w_out, params.b_out)
    if single:
        return dc.reshape(out, (h_tok, params.action_dim))
    return dc.reshape(out, (bsz, h_tok * params.action_dim))
