"""Predictive belief propagation for discrete latent-variable graphical models.

Learning recovers an observable-only parametrization (one operator per
internal separator of a latent junction tree plus a root tensor) by
two-stage instrumental regression; inference passes tensor messages that
answer posterior and joint-evidence queries over observable variables.
"""

from .baselines import EMConfig, EMResult, em_learn, em_wallclock_and_quality, sum_product_exact
from .errors import (
    NumericalError,
    PBPError,
    SingularDesignError,
    TreeMismatchError,
    ValidationError,
    ZeroEvidenceError,
)
from .evaluation import average_posterior_kl, kl_divergence
from .experiment import ExperimentSpec, run_experiment
from .features import FeatureMap, zeta
from .infer import PBPInference, QueryResult, evidence_probability, query_posterior
from .junction_tree import LatentJunctionTree, build_latent_junction_tree
from .learn import LearnedParams, RegressionConfig, learn, learn_population
from .model import (
    Dataset,
    GraphicalModel,
    Structure,
    ancestral_sample,
    brute_force_joint,
    exact_evidence_probability,
    exact_posterior,
    fig2_structure,
    fig4_structure,
    hmm_structure,
    random_latent_structure,
    random_model,
)
from .tensor import ModeLabel, NamedTensor, contract, hadamard, mode_multiply, outer_product, pinv

__version__ = "0.1.0"
