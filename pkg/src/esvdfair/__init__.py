"""Fair regression post-processing by constrained singular-value shrinkage."""
from .errors import *  # noqa: F401,F403
from .esvd import (FairnessConfig, esvdfair_layer, esvdfair_with_adjustment,  # noqa: F401
                   shrink_layer_first_moment, shrink_layer_second_moment,
                   solve_first_moment, solve_second_moment)
from .model import MLP, TrainConfig, least_squares_refit, train  # noqa: F401

__version__ = "0.1.0"
