"""Certified dual gaps for finite-horizon stochastic control.

Train neural penalty generating functions adversarially against per-path
inner maximizations, extract greedy policies, and report dual/primal bounds
with confidence intervals, validated against exact oracles on small
instances.
"""

from .bounds import (BoundReport, ClosedFormSolution, DermResult, GreedyPolicy,
                     StopDecision, SurrogatePolicy, bound_report,
                     derm_stopping_rule, derm_train, dp_oracle_discrete,
                     exec_closed_form, fit_policy_surrogate, relative_gap)
from .control import (ActionSpace, ControlProblem, FiniteNoise, GaussianNoise,
                      NoiseDataset, NoisePath, PolicyValue, Trajectory,
                      enumerate_noise_dataset, evaluate_policy,
                      load_dataset_csv, rollout, sample_noise_dataset,
                      save_dataset_csv)
from .duality import (DualSolveResult, DualValue, PenaltyContext, dual_value,
                      inner_solve, make_penalty_context, pathwise_objective,
                      penalty_term, solve_paths)
from .errors import (ConfigurationError, DualBoundError, EvaluationError,
                     FeasibilityError, ModelError)
from .neural import (CallableGeneratingFunction, FeatureMap,
                     GeneratingFunction, LinearGeneratingFunction,
                     MlpGeneratingFunction, MlpParams, ZeroGeneratingFunction,
                     identity_features, init_mlp_generating_function,
                     mlp_forward, mlp_grad_input, mlp_grad_params, mlp_init,
                     quadratic_feature_dim, quadratic_feature_map,
                     quadratic_features)
from .training import (AdamState, EvalRecord, IterationRecord, TrainConfig,
                       TrainTrace, adam_update, checkpoint_hash, rm_gradient,
                       spsa_gradient, train_adrl)

__version__ = "0.1.0"
