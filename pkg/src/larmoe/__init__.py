"""Desk-scale lab for latent-aligned mixture-of-experts imitation learning.

Two-stage pipeline on a synthetic planar pick-transport-release world:

  1. ``pretrain``   - unsupervised student-teacher latent co-training
  2. ``trainer``    - soft mixture-of-experts policy training with
                      distance-consistency, entropy, and group-sparse
                      regularization on the routing distribution

Supporting modules: ``diffcore`` (reverse-mode autodiff), ``nets``
(parameterized function approximators), ``phaseworld`` (environment and
demonstration generator), ``losses`` (routing regularizers), ``policy``
(gated expert mixture), ``evalsuite`` (rollouts, routing analysis, ablation
harness), ``cli`` (pipeline entry points).
"""

__version__ = "0.1.0"
