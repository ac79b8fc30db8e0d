"""Surrogate maximum-likelihood learning for discrete structured models.

Minimizes the convex dual of the reweighted Bethe likelihood with Frank-Wolfe
iterations whose linear subproblems are MAP calls, and ships exact oracles
(Ryser permanents, enumeration) to check the results at desk scale.
"""

from .dual import (GramCache, LineSearchTerms, dual_objective, grad_dual, line_objective,
                   moment_residual, saddle_objective, theta_star)
from .exact import (SandwichReport, approx_log_likelihood, exact_gradient,
                    exact_log_likelihood, exact_mle, exact_partition, learn_sandwich,
                    log_permanent, ryser_permanent, sample_matchings, sandwich_bounds)
from .exceptions import (BoundaryError, DomainError, GradientUndefinedError,
                         InfeasibleModelError, InvariantViolation, MLEStructError,
                         SizeLimitError, SolverError, StructureError)
from .free_energy import (entropy, free_energy, free_energy_value, grad_entropy,
                          grad_free_energy)
from .frank_wolfe import (FWConfig, FWResult, InferenceResult, bcfw_learn, duality_gap,
                          fw_infer, fw_learn)
from .map_solvers import (brute_force_map, linear_minimizer, map_decode,
                          solve_bipartite_matching, solve_general_perfect_matching,
                          solve_pairwise_binary_lp)
from .models import BipartiteMatching, Dataset, GeneralMatching, PairwiseBinaryGrid
from .synth import make_synthetic, synthetic_dataset

__version__ = "0.1.0"
