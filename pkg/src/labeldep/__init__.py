"""Conditional multi-label density estimation.

A latent-variable model over binary label vectors conditioned on context
features, trained by maximizing a variational bound on the joint conditional
log-likelihood, plus independence and classifier-chain baselines, Monte-Carlo
joint-likelihood evaluation, and oracle-friendly synthetic data generators.
"""

from .autodiff import (
    AutodiffError,
    NumericError,
    ShapeError,
    Tape,
    Var,
    finite_diff_check,
)
from .baselines import (
    ChainConfig,
    ChainModel,
    IndependentConfig,
    IndependentModel,
    independent_jll,
    pcc_joint_loglik,
    pcc_joint_mode,
    train_independent,
    train_pcc,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .cvae import (
    CvaeConfig,
    CvaeModel,
    ElboTerms,
    GaussianParams,
    bernoulli_loglik,
    kl_diag_gauss,
    reparameterize,
    train_cvae,
)
from .data import (
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    histogram_featurize,
    load_jsonl,
    read_ppm,
    save_jsonl,
    split,
    standardize_features,
)
from .evaluate import (
    EvalReport,
    cvae_neg_jll,
    elbo_gap,
    evaluate_model,
    exact_neg_jll,
    marginal_probs,
    pr_curve,
)
from .nn import Adam, EarlyStopper, Mlp, MlpSpec
from .training import TrainConfig, fit

__version__ = "0.1.0"
