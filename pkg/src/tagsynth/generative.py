"""Conditional generative model over (instance, tag labels, target labels).

An encoder produces a diagonal Gaussian over a latent code z that is meant to
carry only label-independent style; a decoder renders an instance from
(z, tag labels, target labels); the graph-aware classifier supplies soft
labels wherever true ones are missing, so reconstruction gradients reach it.

Loss terms:

* labeled evidence bound      recon - KL(z) - KL(target labels vs OR prior)
* unlabeled evidence bound    recon - KL(z) - KL(all labels vs joint prior)
* consistency constraint      cross-entropy between the classifier's reading
                              of a decoded instance and the labels it was
                              rendered from (keeps labels out of z)
* supervised tag loss         plain BCE on the labeled pool

total = -(labeled bound) - (unlabeled bound)
        + alpha * constraint + beta * supervised
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Parameter, ShapeError, Tensor, check_unique_names
from .classifier import ClassifierParams, classify, init_classifier, loss_supervised
from .labelgraph import LabelGraph, LabelSpace, estimate_target_prior_batch
from .nets import DenseLayer, GaussianHead, init_gaussian_head

LABEL_SOURCES = ("prior", "posterior", "mixed")


@dataclass
class GenConfig:
    """Generative model hyperparameters; defaults mirror the text-data setup."""

    latent_dim: int = 8
    alpha: float = 0.1
    beta: float = 0.1
    prior_clamp_eps: float = 1e-3
    constraint_label_source: str = "mixed"
    constraint_stop_grad_classifier: bool = True
    fixed_decoder_sigma: float | None = None
    encoder_hidden: tuple[int, ...] = (128,)
    decoder_hidden: tuple[int, ...] = (128,)
    extractor_hidden: tuple[int, ...] = (128, 128)
    feature_dim: int = 64
    gcn_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.constraint_label_source not in LABEL_SOURCES:
            raise ValueError(
                f"constraint_label_source must be one of {LABEL_SOURCES}, "
                f"got {self.constraint_label_source!r}"
            )
        if not (0.0 < self.prior_clamp_eps < 0.5):
            raise ValueError("prior_clamp_eps must lie in (0, 0.5)")
        if self.fixed_decoder_sigma is not None and self.fixed_decoder_sigma <= 0:
            raise ValueError("fixed_decoder_sigma must be positive when set")


@dataclass
class ModelParams:
    encoder: GaussianHead
    decoder: GaussianHead
    classifier: ClassifierParams

    def parameters(self) -> list[Parameter]:
        out = (
            self.encoder.parameters("encoder")
            + self.decoder.parameters("decoder")
            + self.classifier.parameters("classifier")
        )
        check_unique_names(out)
        return out

    def encoder_parameters(self) -> list[Parameter]:
        return self.encoder.parameters("encoder")

    def decoder_parameters(self) -> list[Parameter]:
        return self.decoder.parameters("decoder")

    def classifier_parameters(self) -> list[Parameter]:
        return self.classifier.parameters("classifier")


def init_model(rng: np.random.Generator, input_dim: int, space: LabelSpace,
               embed_dim: int, config: GenConfig) -> ModelParams:
    encoder = init_gaussian_head(rng, input_dim, config.encoder_hidden,
                                 config.latent_dim, config.activation)
    decoder = init_gaussian_head(rng, config.latent_dim + space.n_classes,
                                 config.decoder_hidden, input_dim, config.activation)
    classifier = init_classifier(rng, input_dim, embed_dim,
                                 config.extractor_hidden, config.feature_dim,
                                 config.gcn_hidden, config.activation)
    return ModelParams(encoder=encoder, decoder=decoder, classifier=classifier)


def encode(x, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Posterior mean and sigma over the latent code for a (n, d) batch."""
    return params.encoder(x)


def decode(z: Tensor, labels: Tensor, params: ModelParams,
           config: GenConfig) -> tuple[Tensor, Tensor]:
    """Instance mean and sigma from latent code plus full label vector."""
    dec_in = ad.concat([z if isinstance(z, Tensor) else Tensor(z),
                        labels if isinstance(labels, Tensor) else Tensor(labels)], axis=1)
    h = params.decoder.trunk(dec_in)
    mu = params.decoder.mu_head(h)
    if config.fixed_decoder_sigma is not None:
        sigma = Tensor(np.full(mu.values.shape, float(config.fixed_decoder_sigma)))
    else:
        half_log_var = ad.clamp(params.decoder.half_log_var_head(h),
                                ad.HALF_LOG_VAR_MIN, ad.HALF_LOG_VAR_MAX)
        sigma = ad.exp(half_log_var)
    return mu, sigma


@dataclass
class EmpiricalLabelModel:
    """Label statistics of the labeled pool, used for priors and sampling."""

    pool: np.ndarray          # observed tag vectors, one row per instance
    tag_marginals: np.ndarray
    target_marginals: np.ndarray
    clamp_eps: float

    @classmethod
    def from_labeled(cls, y_s_rows, graph: LabelGraph,
                     clamp_eps: float = 1e-3) -> "EmpiricalLabelModel":
        pool = np.asarray(y_s_rows, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] == 0:
            raise ValueError(f"need a nonempty (n, n_inexact) pool, got shape {pool.shape}")
        tag_m = np.clip(pool.mean(axis=0), clamp_eps, 1.0 - clamp_eps)
        target_rows = estimate_target_prior_batch(pool, graph)
        target_m = np.clip(target_rows.mean(axis=0), clamp_eps, 1.0 - clamp_eps)
        return cls(pool=pool, tag_marginals=tag_m,
                   target_marginals=target_m, clamp_eps=clamp_eps)

    def sample_rows(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, self.pool.shape[0], size=n)
        return self.pool[idx].copy()

    def joint_marginals(self) -> np.ndarray:
        return np.concatenate([self.tag_marginals, self.target_marginals])


@dataclass
class ElboTerms:
    """Batch-mean pieces of one evidence bound, still differentiable."""

    recon: Tensor
    kl_z: Tensor
    kl_y: Tensor
    z: Tensor        # sampled latents, one row per instance
    labels: Tensor   # the label vector handed to the decoder

    def bound(self) -> Tensor:
        return self.recon - self.kl_z - self.kl_y


def _draw_eps(rng, n: int, dim: int, eps) -> np.ndarray:
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (n, dim):
            raise ShapeError(f"eps must be ({n}, {dim}), got {eps.shape}")
        return eps
    if rng is None:
        raise ValueError("either rng or explicit eps noise is required")
    return rng.standard_normal((n, dim))


def elbo_labeled(x, y_s, graph: LabelGraph, params: ModelParams, config: GenConfig,
                 rng: np.random.Generator | None = None, eps=None,
                 prior_graph: LabelGraph | None = None) -> ElboTerms:
    """Evidence bound for instances with observed tags but unknown targets."""
    x = np.asarray(x, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("labeled batch is empty")
    prior_graph = prior_graph or graph

    mu_z, sigma_z = encode(x, params)
    z = ad.reparam_sample(mu_z, sigma_z, _draw_eps(rng, n, config.latent_dim, eps))
    kl_z = ad.kl_diag_gaussian_vs_std_normal(mu_z, sigma_z) * (1.0 / n)

    pred = classify(x, graph, params.classifier)
    prior = estimate_target_prior_batch(y_s, prior_graph)
    prior = np.clip(prior, config.prior_clamp_eps, 1.0 - config.prior_clamp_eps)
    kl_y = ad.kl_bernoulli_vec(pred.target_probs, Tensor(prior)) * (1.0 / n)

    labels = ad.concat([Tensor(y_s), pred.target_probs], axis=1)
    mu_x, sigma_x = decode(z, labels, params, config)
    recon = ad.gaussian_log_likelihood(x, mu_x, sigma_x) * (1.0 / n)
    return ElboTerms(recon=recon, kl_z=kl_z, kl_y=kl_y, z=z, labels=labels)


def elbo_unlabeled(x, graph: LabelGraph, params: ModelParams, config: GenConfig,
                   label_model: EmpiricalLabelModel,
                   rng: np.random.Generator | None = None, eps=None) -> ElboTerms:
    """Evidence bound for instances with no labels at all.

    Unknown labels are integrated out through the classifier's soft output;
    the label prior is the factorized Bernoulli with empirical marginals.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("unlabeled batch is empty")

    mu_z, sigma_z = encode(x, params)
    z = ad.reparam_sample(mu_z, sigma_z, _draw_eps(rng, n, config.latent_dim, eps))
    kl_z = ad.kl_diag_gaussian_vs_std_normal(mu_z, sigma_z) * (1.0 / n)

    pred = classify(x, graph, params.classifier)
    q = ad.concat([pred.tag_probs, pred.target_probs], axis=1)
    marginals = np.clip(label_model.joint_marginals(),
                        config.prior_clamp_eps, 1.0 - config.prior_clamp_eps)
    prior = Tensor(np.broadcast_to(marginals, (n, marginals.size)).copy())
    kl_y = ad.kl_bernoulli_vec(q, prior) * (1.0 / n)

    mu_x, sigma_x = decode(z, q, params, config)
    recon = ad.gaussian_log_likelihood(x, mu_x, sigma_x) * (1.0 / n)
    return ElboTerms(recon=recon, kl_z=kl_z, kl_y=kl_y, z=z, labels=q)


def classifier_prior_kl(x, y_s, graph: LabelGraph, classifier: ClassifierParams,
                        config: GenConfig,
                        prior_graph: LabelGraph | None = None) -> Tensor:
    """Batch-mean KL between predicted target labels and the OR-rule prior.

    This is the target-label calibration term of the labeled bound, reused on
    its own while pretraining the classifier.
    """
    y_s = np.asarray(y_s, dtype=np.float64)
    n = y_s.shape[0]
    pred = classify(x, graph, classifier)
    prior = estimate_target_prior_batch(y_s, prior_graph or graph)
    prior = np.clip(prior, config.prior_clamp_eps, 1.0 - config.prior_clamp_eps)
    return ad.kl_bernoulli_vec(pred.target_probs, Tensor(prior)) * (1.0 / n)


@dataclass
class ConstraintNoise:
    """Frozen randomness for one constraint evaluation."""

    prior_mask: np.ndarray   # rows drawn from the prior label source
    y_s_prior: np.ndarray
    z_prior: np.ndarray


def draw_constraint_noise(rng: np.random.Generator, n: int, config: GenConfig,
                          label_model: EmpiricalLabelModel) -> ConstraintNoise:
    if config.constraint_label_source == "prior":
        mask = np.ones(n, dtype=bool)
    elif config.constraint_label_source == "posterior":
        mask = np.zeros(n, dtype=bool)
    else:
        mask = rng.random(n) < 0.5
    return ConstraintNoise(
        prior_mask=mask,
        y_s_prior=label_model.sample_rows(rng, n),
        z_prior=rng.standard_normal((n, config.latent_dim)),
    )


def loss_constraint(n: int, graph: LabelGraph, params: ModelParams, config: GenConfig,
                    label_model: EmpiricalLabelModel,
                    rng: np.random.Generator | None = None,
                    noise: ConstraintNoise | None = None,
                    posterior: tuple[Tensor, Tensor] | None = None,
                    prior_graph: LabelGraph | None = None) -> Tensor:
    """Consistency constraint: decode assigned labels, let the classifier read
    the result back, and score the disagreement.

    ``posterior`` carries (z, labels) tensors from the current batch for the
    posterior label source. Assigned labels are constants: the judge scores
    them, nothing trains them. With constraint_stop_grad_classifier the judge
    itself is frozen too, so the classifier receives exactly zero gradient.
    """
    if n < 1:
        raise ValueError(f"constraint batch size must be positive, got {n}")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or explicit constraint noise is required")
        noise = draw_constraint_noise(rng, n, config, label_model)
    if noise.prior_mask.shape != (n,):
        raise ShapeError(f"prior mask must have shape ({n},), got {noise.prior_mask.shape}")
    prior_graph = prior_graph or graph

    y_t_prior = estimate_target_prior_batch(noise.y_s_prior, prior_graph)
    labels_prior = np.hstack([noise.y_s_prior, y_t_prior])

    need_posterior = not noise.prior_mask.all()
    if need_posterior:
        if posterior is None:
            raise ValueError(
                "posterior label source requested but no posterior materials given"
            )
        z_post, labels_post = posterior
        if z_post.values.shape[0] != n or labels_post.values.shape[0] != n:
            raise ShapeError("posterior materials must match the constraint batch size")
        z = ad.where_rows(noise.prior_mask, Tensor(noise.z_prior), z_post)
        labels = ad.where_rows(noise.prior_mask, Tensor(labels_prior),
                               labels_post.detach())
    else:
        z = Tensor(noise.z_prior)
        labels = Tensor(labels_prior)

    mu_x, _ = decode(z, labels, params, config)
    judge = params.classifier.detached() if config.constraint_stop_grad_classifier \
        else params.classifier
    pred = classify(mu_x, graph, judge)
    q = ad.concat([pred.tag_probs, pred.target_probs], axis=1)
    return ad.binary_cross_entropy(q, labels.values) * (1.0 / n)


@dataclass
class LossBreakdown:
    """Float view of one objective evaluation; fields satisfy
    total == -recon + kl_z + kl_y + alpha * l_cons + beta * l_c_s."""

    recon: float
    kl_z: float
    kl_y: float
    l_cons: float
    l_c_s: float
    total: float


@dataclass
class LossNoise:
    """Every random draw a single objective evaluation needs."""

    eps_labeled: np.ndarray
    eps_unlabeled: np.ndarray
    constraint: ConstraintNoise


def draw_loss_noise(rng: np.random.Generator, n_labeled: int, n_unlabeled: int,
                    config: GenConfig, label_model: EmpiricalLabelModel) -> LossNoise:
    return LossNoise(
        eps_labeled=rng.standard_normal((n_labeled, config.latent_dim)),
        eps_unlabeled=rng.standard_normal((n_unlabeled, config.latent_dim)),
        constraint=draw_constraint_noise(rng, n_labeled + n_unlabeled, config, label_model),
    )


def total_loss(x_l, y_s_l, x_u, graph: LabelGraph, params: ModelParams,
               config: GenConfig, label_model: EmpiricalLabelModel,
               rng: np.random.Generator | None = None,
               noise: LossNoise | None = None,
               prior_graph: LabelGraph | None = None) -> tuple[Tensor, LossBreakdown]:
    """Full training objective over one labeled and one unlabeled batch."""
    x_l = np.asarray(x_l, dtype=np.float64)
    x_u = np.asarray(x_u, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or explicit loss noise is required")
        noise = draw_loss_noise(rng, x_l.shape[0], x_u.shape[0], config, label_model)

    terms_l = elbo_labeled(x_l, y_s_l, graph, params, config,
                           eps=noise.eps_labeled, prior_graph=prior_graph)
    terms_u = elbo_unlabeled(x_u, graph, params, config, label_model,
                             eps=noise.eps_unlabeled)

    z_all = ad.concat([terms_l.z, terms_u.z], axis=0)
    labels_all = ad.concat([terms_l.labels, terms_u.labels], axis=0)
    n_cons = x_l.shape[0] + x_u.shape[0]
    l_cons = loss_constraint(n_cons, graph, params, config, label_model,
                             noise=noise.constraint, posterior=(z_all, labels_all),
                             prior_graph=prior_graph)
    l_c_s = loss_supervised(x_l, y_s_l, graph, params.classifier)

    recon = terms_l.recon + terms_u.recon
    kl_z = terms_l.kl_z + terms_u.kl_z
    kl_y = terms_l.kl_y + terms_u.kl_y
    total = (-recon) + kl_z + kl_y + config.alpha * l_cons + config.beta * l_c_s
    breakdown = LossBreakdown(
        recon=recon.item(), kl_z=kl_z.item(), kl_y=kl_y.item(),
        l_cons=l_cons.item(), l_c_s=l_c_s.item(), total=total.item(),
    )
    return total, breakdown


def sample_labeled(n_s: int, graph: LabelGraph, params: ModelParams, config: GenConfig,
                   rng: np.random.Generator,
                   label_model: EmpiricalLabelModel | None = None,
                   label_pool=None,
                   prior_graph: LabelGraph | None = None) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Draw n_s synthetic labeled instances (x, y_s, y_t).

    Tag vectors come from the empirical pool (or an explicit label list),
    target labels from the OR rule, and instances from the decoder mean.
    Labels are drawn before any decoder input, so they never depend on
    decoder parameters.
    """
    if n_s <= 0:
        raise ValueError(f"n_s must be positive, got {n_s}")
    if label_pool is not None:
        pool = np.asarray(label_pool, dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] == 0:
            raise ValueError(f"label pool must be a nonempty (n, n_inexact) array, got {pool.shape}")
        idx = rng.integers(0, pool.shape[0], size=n_s)
        y_s = pool[idx].copy()
    elif label_model is not None:
        y_s = label_model.sample_rows(rng, n_s)
    else:
        raise ValueError("need a label_model or an explicit label_pool")

    y_t = estimate_target_prior_batch(y_s, prior_graph or graph)
    z = rng.standard_normal((n_s, config.latent_dim))
    labels = np.hstack([y_s, y_t])
    mu_x, _ = decode(Tensor(z), Tensor(labels), params, config)
    x = mu_x.values
    return [(x[i].copy(), y_s[i].copy(), y_t[i].copy()) for i in range(n_s)]
