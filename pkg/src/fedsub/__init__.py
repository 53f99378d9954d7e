"""Subspace federated optimization with low-dimensional dual variables."""
from .kernels import BACKEND
from .layered import (LayeredMatrix, LayerScalars, LayerShape, ShapeMismatchError, add, average,
                      norm, norm_sq, scale_layerwise)
from .projection import (ProjectionMethod, ProjectionSet, SubspaceDims, generate, project_down,
                         project_up, transport, validate_assumption1)
from .objectives import (Dataset, LogisticRegression, Quadratic, ReferenceSolution, TwoLayerMLP,
                         generate_clustered_data, solve_reference)
from .federation import (ClientState, DivergenceError, Engine, FedConfig, Federation, RoundRecord,
                         ServerState, run, run_fedavg)
from .costs import CostModel, measure_uplink, tally_round

__version__ = "0.1.0"
