"""Stochastic decoupled policy gradient (SDPG) at desk scale.

Subpackages of note: :mod:`sdpg.nn` (numpy approximators), :mod:`sdpg.envs`
(analytic tasks), :mod:`sdpg.rollout` (nominal/auxiliary segments),
:mod:`sdpg.update` (targets and losses), :mod:`sdpg.trainer`,
:mod:`sdpg.oracle` and the ``sdpg`` command line in :mod:`sdpg.cli`.
"""

__version__ = "0.1.0"
