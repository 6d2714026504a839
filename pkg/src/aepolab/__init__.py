"""Toy-scale reflection-aware entropy-regularized policy optimization.

Modules: :mod:`~aepolab.policy` (tiny autoregressive policy), :mod:`~aepolab.tasks`
(synthetic multiple-choice tasks), :mod:`~aepolab.stages` (four-stage response
segmentation), :mod:`~aepolab.reward`, :mod:`~aepolab.rollout`,
:mod:`~aepolab.optimizer` (AEPO/GRPO/DAPO losses), :mod:`~aepolab.trainer`,
:mod:`~aepolab.metrics` and :mod:`~aepolab.cli`.
"""

__version__ = "0.1.0"
