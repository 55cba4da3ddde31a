from .execution import (
    ExecState,
    TradeExecModel,
    cost_scale,
    dump_model_csv,
    exec_dynamics,
    exec_stage_cost,
    feature_scales,
    make_exec_problem,
    project_schedule,
    resolve_model,
)
from .projection import (
    project_box_hyperplane,
    project_hyperplane,
    project_simplex,
    project_simplex_bruteforce,
)
from .toy import MAX_TOY_HORIZON, make_toy_chain, make_toy_t1

__all__ = [
    "ExecState",
    "TradeExecModel",
    "cost_scale",
    "dump_model_csv",
    "exec_dynamics",
    "exec_stage_cost",
    "feature_scales",
    "make_exec_problem",
    "project_schedule",
    "resolve_model",
    "project_box_hyperplane",
    "project_hyperplane",
    "project_simplex",
    "project_simplex_bruteforce",
    "MAX_TOY_HORIZON",
    "make_toy_chain",
    "make_toy_t1",
]
