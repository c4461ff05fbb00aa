"""Control-oriented experiment design for uncertain linear systems."""

from .model import (Dataset, ExperimentPlan, InvalidModelError, LqrSpec, MatrixNormalPrior,
                    SystemParams, car_string_lqr, car_string_prior, car_string_system,
                    devectorize, vectorize)

__all__ = [
    "Dataset", "ExperimentPlan", "InvalidModelError", "LqrSpec", "MatrixNormalPrior",
    "SystemParams", "car_string_lqr", "car_string_prior", "car_string_system",
    "devectorize", "vectorize",
]
