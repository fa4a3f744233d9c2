"""Learned inverse operators for minimum-phase SISO LTI plants.

The package builds the normal form of a plant, reconstructs its hidden
state from a finite output window, and trains small networks that map an
output history plus output derivatives to the inverse input.
"""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CompatibilityError, DomainError, KoopinvError, NormalizationUndefined, OperatorUnstable,
    TrainingFailed,
)
from .lti_core import (  # noqa: E402
    NormalForm, StateSpace, Trajectory, TransferFunction, build_example_system,
    identify_relative_degree_from_step, normal_form, relative_degree, simulate, transfer_function,
)
from .signals import desired_trajectory, excitation_signal, filter_chain  # noqa: E402
from .exact_inverse import (  # noqa: E402
    decay_bound, exact_inverse_input, hidden_state_full, hidden_state_window,
)
from .learner import FeatureSpec, MlpModel, TrainConfig, build_dataset, predict, train_mlp  # noqa: E402
from .config import RunConfig, load_config  # noqa: E402
from .eval_harness import (  # noqa: E402
    MetricReport, SweepResult, metric_report, normalized_errors, sweep_derivatives, sweep_history,
)
