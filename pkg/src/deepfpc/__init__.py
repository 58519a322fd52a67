"""Sparse recovery from 1-bit measurements: FPC-l1, DeepFPC and 1-bit DOA."""
from ._backend import BACKEND
from .errors import (DeepFpcError, DegenerateError, InsufficientSnapshotsError,
                     InvalidArgumentError, ModelFormatError)
from .fpc import FpcConfig, FpcState, fpc_step, objective, one_sided_gradient, soft_threshold, solve
from .network import (ForwardTape, ParameterGradients, UnfoldedModel, accumulate, backward,
                      forward, init_from_fpc, load_model, loss, save_model)
from .sensing import (SparseSignal, generate_gaussian_matrix, generate_sparse_signal, measure,
                      nmse, nmse_db, quantize, unit_normalize)

__version__ = "0.1.0"
