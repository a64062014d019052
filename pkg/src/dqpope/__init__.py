"""Distributional off-policy evaluation by deep quantile process regression.

Modules:

* :mod:`dqpope.envs` -- toy, cart-pole and tabular environments, policies,
  occupancy sampling and Monte-Carlo return oracles.
* :mod:`dqpope.tabular` -- exact distributional Bellman iteration on finite MDPs.
* :mod:`dqpope.neural` -- ReLU networks with explicit backprop and Adam.
* :mod:`dqpope.metrics` -- pinball loss, empirical W_1, value summaries.
* :mod:`dqpope.estimators` -- DQPOPE and the DOPE, DQOPE, CateOPE, WIS, DR baselines.
* :mod:`dqpope.experiments` / :mod:`dqpope.cli` -- config-driven experiment runs.
"""
from .envs import (PolicySpec, ReturnDistribution, Transition, collect_dataset, make_cartpole_env,
                   make_toy_env, mc_return_distribution, mixture_policy, sample_student_t)
from .errors import ConfigError, DegenerateRatioError, InputError, ResourceError, TrainingDivergedError
from .estimators import (AtomsConfig, CategoricalModel, DiscreteQuantileModel, DqpopeConfig,
                         cateope_project, cateope_train, dope_train, dqope_train, dqpope_train,
                         dr_estimate, wis_estimate)
from .metrics import (mse_over_replicates, pinball, pinball_grad, sample_from_net, value_from_quantiles,
                      w1_empirical)
from .neural import AdamState, QuantileNet, adam_step, make_net, soft_update
from .tabular import DiscreteReturnLaw, TabularMdp, apply_bellman, fixed_point, wbar_p

__all__ = [
    "AdamState", "AtomsConfig", "CategoricalModel", "ConfigError", "DegenerateRatioError",
    "DiscreteQuantileModel", "DiscreteReturnLaw", "DqpopeConfig", "InputError", "PolicySpec",
    "QuantileNet", "ResourceError", "ReturnDistribution", "TabularMdp", "TrainingDivergedError",
    "Transition", "adam_step", "apply_bellman", "cateope_project", "cateope_train", "collect_dataset",
    "dope_train", "dqope_train", "dqpope_train", "dr_estimate", "fixed_point", "make_cartpole_env",
    "make_net", "make_toy_env", "mc_return_distribution", "mixture_policy", "mse_over_replicates",
    "pinball", "pinball_grad", "sample_from_net", "sample_student_t", "soft_update",
    "value_from_quantiles", "w1_empirical", "wbar_p", "wis_estimate",
]
