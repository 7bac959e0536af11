"""Privacy-aware state estimation for Markov-modulated dynamical systems.

Subpackages cover the system model and closed-loop sampling, exact oracles on
a finite surrogate (beliefs, mutual information, Bellman recursion),
stochastic estimation policies, the variational information-loss critics, the
policy-gradient trainer, the maximum-likelihood adversary, and the classical
MMSE/additive-noise baseline.
"""

from .adversary import DecoderHMM, accuracy, misdetections, viterbi
from .baseline import baseline_sweep, grid_mmse, perturb
from .errors import (
    ConfigError,
    ImpossibleActionError,
    ImpossibleHistoryError,
    ImpossibleObservationError,
    InstanceTooLargeError,
    PrivestError,
)
from .finite import (
    BeliefState,
    DPResult,
    FiniteSystem,
    PolicyCollection,
    TreePolicyAdapter,
    WindowPolicyAdapter,
    adversary_posterior,
    belief_init,
    belief_update,
    direct_info_loss,
    discretize,
    dp_solve,
    exact_evaluate,
    exact_joint,
    exact_mi,
    make_distortion_table,
    mi_chain,
    stage_cost,
)
from .infoloss import (
    MlpCritic,
    TabularCritic,
    eval_f,
    eval_g,
    info_loss_estimate,
    kl_variational,
    maximize_kl_variational,
    objective_f,
    objective_g,
)
from .model import (
    LinGaussDynamics,
    MeasurementModel,
    PrivateChain,
    Quantizer,
    SystemModel,
    Tessellation,
    TrajectoryBatch,
    measure_and_quantize,
    rollout,
    sample_private_path,
    step_dynamics,
)
from .policy import HistoryWindow, MlpPolicy, TabularPolicy, log_prob_grad, policy_dist
from .trainer import (
    TrainConfig,
    TrainReport,
    evaluate,
    exact_policy_gradient,
    policy_gradient,
    stage_loss,
    train,
)

__version__ = "0.1.0"
