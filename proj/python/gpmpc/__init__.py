"""Sparse GP-MPC with exact mean/variance propagation via iterated LPV QPs."""

from ._gpmpc import (  # noqa: F401
    BenchmarkReport,
    Dataset,
    FullGpModel,
    GaussianBelief,
    Hyperparams,
    QpProblem,
    QpSolution,
    QuadParams,
    RunConfig,
    SparseGpModel,
    build_sparse_model,
    collect_dataset,
    gp_fit,
    gp_predict,
    mm_gp_moments,
    nlml,
    qp_solve,
    quad_propagate_step,
    run_benchmark,
    se_kernel,
    sparse_gp_from_json,
    sparse_gp_to_json,
    sparse_predict,
    taylor_gp_moments,
    train_full,
    train_models,
    train_sparse,
    vfe_objective,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
