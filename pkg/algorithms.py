#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Local trainers run by every client within a global round: pFedBreD with
the fo / mfo / mg / mg_variant prior mean selections, pFedMe, FedAvg and
first-order Per-FedAvg, plus the fine-tuning (FT) trick used at
evaluation time.

A client handed to the trainers provides theta, memorized_w and
sample_batch(batch_size, stream=None); see federation.ClientState. The
model spec turns a batch into a SmoothLoss with spec.objective(batch).
"""

import logging

from traits.api import Bool, Enum, HasTraits, Union

from bregman import (ConvexGenerator, DomainError, PriorSpec,
                     ProxDivergenceError, bregman_prox, envelope_gradient)
from param_space import NonFiniteError, linear_combine
from traitdefs import (NonNegativeFloat, PositiveFloat, PositiveInt)

logger = logging.getLogger(__name__)

STRATEGIES = ['pfedbred_fo', 'pfedbred_mfo', 'pfedbred_mg',
              'pfedbred_mg_variant', 'pfedme', 'fedavg', 'perfedavg_fo']
PFEDBRED_STRATEGIES = STRATEGIES[:4]


class LocalUpdateError(ArithmeticError):

    def __init__(self, round_index, iteration, msg):
        ArithmeticError.__init__(self, 'round %d, local iteration %d: %s'
                                 % (round_index, iteration, msg))
        self.round_index = round_index
        self.iteration = iteration


class TrainerConfigError(ValueError):
    """A cross-field check failed; trait names the field to change."""

    def __init__(self, msg, trait):
        ValueError.__init__(self, msg)
        self.trait = trait


class TrainerConfig(HasTraits):
    """
    Scalars of the local update. Fields a strategy does not use are still
    validated but ignored.
    """
    strategy = Enum(STRATEGIES)
    lam = PositiveFloat(15.0)
    # memory-term and gradient-term step sizes of the prior mean selection
    eta = NonNegativeFloat(0.05)
    eta_alpha = NonNegativeFloat(0.01)
    # main (global-model) and personalized/inner step sizes
    alpha_m = NonNegativeFloat(0.01)
    alpha = NonNegativeFloat(0.01)
    K = PositiveInt(5)
    R = PositiveInt(20)
    batch_size = PositiveInt(20)
    ft_enabled = Bool(False)
    ft_steps = PositiveInt(1)
    # replace lam (w - theta) in the outer step by the memorized form too
    memorized_outer_step = Bool(False)
    # mg_variant step sizes; None means eta_alpha / eta and eta_alpha
    eta_tilde_alpha = Union(None, NonNegativeFloat())
    eta_tilde = Union(None, NonNegativeFloat())
    perfedavg_eval_steps = PositiveInt(2)
    prior_family = Enum(['gaussian', 'bernoulli', 'poisson', 'exponential'])
    prior_scale = PositiveFloat(1.0)

    def check(self):
        if self.strategy in PFEDBRED_STRATEGIES + ['pfedme']:
            if self.alpha <= 0.0:
                raise TrainerConfigError("The prox solver needs alpha > 0",
                                         'alpha')
            if self.prior_family != 'gaussian':
                raise TrainerConfigError("Trainers support the gaussian prior "
                                         "only, got %s" % self.prior_family,
                                         'prior_family')
        if (self.strategy == 'pfedbred_mg_variant' and self.eta == 0.0
                and self.eta_tilde_alpha is None):
            raise TrainerConfigError("mg_variant with eta = 0 needs an "
                                     "explicit eta_tilde_alpha",
                                     'eta_tilde_alpha')
        return self

    def prior_spec(self):
        gen = ConvexGenerator(family=self.prior_family,
                              scale=self.prior_scale)
        return PriorSpec(generator=gen, lam=self.lam)

    def variant_steps(self):
        """(eta_tilde_alpha, eta_tilde) with the documented defaults"""
        eta_tilde_alpha = self.eta_tilde_alpha
        if eta_tilde_alpha is None:
            eta_tilde_alpha = self.eta_alpha / self.eta
        eta_tilde = self.eta_tilde
        if eta_tilde is None:
            eta_tilde = self.eta_alpha
        return eta_tilde_alpha, eta_tilde


def _mean_rule(strategy):
    if strategy.startswith('pfedbred_'):
        return strategy[len('pfedbred_'):]
    return strategy


def select_prior_mean(strategy, w_cur, grad_f_at_w, memorized_w, theta_prev,
                      eta, eta_alpha, grad_fn=None, eta_tilde_alpha=None,
                      eta_tilde=None):
    """
    Personalized prior mean mu = w - eta * grad Phi(w):

      fo          w - eta_alpha grad f(w)
      mfo         w - eta (memorized_w - theta_prev)
      mg          w - eta (memorized_w - theta_prev) - eta_alpha grad f(w)
      mg_variant  w - eta (memorized_w - theta_prev)
                    - eta eta_tilde_alpha grad f(w - eta_tilde grad f(w))
      pfedme      w

    grad_fn evaluates grad f at another point (mg_variant only).
    """
    rule = _mean_rule(strategy)
    if rule == 'pfedme':
        return w_cur
    elif rule == 'fo':
        return linear_combine([(1.0, w_cur), (-eta_alpha, grad_f_at_w)])
    memory = [(1.0, w_cur), (-eta, memorized_w), (eta, theta_prev)]
    if rule == 'mfo':
        return linear_combine(memory)
    elif rule == 'mg':
        return linear_combine(memory + [(-eta_alpha, grad_f_at_w)])
    elif rule == 'mg_variant':
        inner = linear_combine([(1.0, w_cur), (-eta_tilde, grad_f_at_w)])
        return linear_combine(memory + [(-eta * eta_tilde_alpha,
                                         grad_fn(inner))])
    raise ValueError("Unknown prior mean strategy %r" % strategy)


def _prox_local_loop(client, w_in, config, spec, strategy, round_index):
    prior = config.prior_spec()
    rule = _mean_rule(strategy)
    needs_grad = rule in ('fo', 'mg', 'mg_variant')
    eta_tilde_alpha, eta_tilde = (config.variant_steps()
                                  if rule == 'mg_variant' else (None, None))
    w = w_in
    theta = client.theta
    memorized_w = client.memorized_w
    for r in range(1, config.R + 1):
        try:
            objective = spec.objective(client.sample_batch(
                config.batch_size))
            grad_w = objective.gradient(w) if needs_grad else None
            mu = select_prior_mean(strategy, w, grad_w, memorized_w, theta,
                                   config.eta, config.eta_alpha,
                                   objective.gradient, eta_tilde_alpha,
                                   eta_tilde)
            theta_prev = theta
            theta = bregman_prox(prior, objective, mu, config.K,
                                 config.alpha, start=theta)
            if config.memorized_outer_step and rule != 'pfedme':
                step = linear_combine([(config.eta, memorized_w),
                                       (-config.eta, theta_prev)])
            else:
                step = envelope_gradient(prior, objective, w, theta)
            w = linear_combine([(1.0, w), (-config.alpha_m, step)])
        except (NonFiniteError, ProxDivergenceError, DomainError) as err:
            raise LocalUpdateError(round_index, r, str(err))
    return w, theta


def local_update_pfedbred(client, w_in, config, spec, round_index=0):
    """
    R local iterations of: sample a batch, select the prior mean, solve
    the prox warm-started at the previous theta, then
    w <- w - alpha_m lam (w - theta). Returns (w_R, theta_R).
    """
    return _prox_local_loop(client, w_in, config, spec, config.strategy,
                            round_index)


def local_update_pfedme(client, w_in, config, spec, round_index=0):
    """pFedBreD with the identity prior mean mu = w."""
    return _prox_local_loop(client, w_in, config, spec, 'pfedme',
                            round_index)


def local_update_fedavg(client, w_in, config, spec, round_index=0):
    w = w_in
    for r in range(1, config.R + 1):
        try:
            objective = spec.objective(client.sample_batch(
                config.batch_size))
            w = linear_combine([(1.0, w),
                                (-config.alpha, objective.gradient(w))])
        except NonFiniteError as err:
            raise LocalUpdateError(round_index, r, str(err))
    return w


def local_update_perfedavg_fo(client, w_in, config, spec, round_index=0):
    """
    First-order MAML: w_tmp <- w - alpha grad f_B1(w), then
    w <- w - alpha_m grad f_B2(w_tmp).
    """
    w = w_in
    for r in range(1, config.R + 1):
        try:
            first = spec.objective(client.sample_batch(
                config.batch_size))
            second = spec.objective(client.sample_batch(
                config.batch_size))
            w_tmp = linear_combine([(1.0, w),
                                    (-config.alpha, first.gradient(w))])
            w = linear_combine([(1.0, w),
                                (-config.alpha_m, second.gradient(w_tmp))])
        except NonFiniteError as err:
            raise LocalUpdateError(round_index, r, str(err))
    return w


def fine_tune(params, objective, steps=1, stepsize=0.01):
    """steps gradient steps on one batch objective; params is not touched"""
    for _ in range(steps):
        params = linear_combine([(1.0, params),
                                 (-stepsize, objective.gradient(params))])
    return params


class LocalTrainer(object):
    """
    Binds a TrainerConfig and a ModelSpec. local_update() returns the
    client's (w_R, theta_R); personalized_model() builds the model that is
    evaluated on the client's local test data.
    """
    uses_theta = True

    def __init__(self, config, spec):
        self.config = config.check()
        self.spec = spec
        logger.debug("%s trainer: R=%d, K=%d, batch_size=%d", config.strategy,
                     config.R, config.K, config.batch_size)

    @property
    def name(self):
        return self.config.strategy

    def local_update(self, client, w_in, round_index=0):
        raise NotImplementedError

    def _personal_base(self, client, w, eval_stream):
        return client.theta

    def personalized_model(self, client, w, eval_stream):
        """
        eval_stream supplies the fine-tuning batches so that evaluation
        never consumes the client's training stream.
        """
        model = self._personal_base(client, w, eval_stream)
        cfg = self.config
        if cfg.ft_enabled:
            batch = client.sample_batch(cfg.batch_size, eval_stream)
            model = fine_tune(model, self.spec.objective(batch),
                              cfg.ft_steps, cfg.alpha)
        return model


class PFedBreDTrainer(LocalTrainer):

    def local_update(self, client, w_in, round_index=0):
        return local_update_pfedbred(client, w_in, self.config, self.spec,
                                     round_index)


class PFedMeTrainer(LocalTrainer):

    def local_update(self, client, w_in, round_index=0):
        return local_update_pfedme(client, w_in, self.config, self.spec,
                                   round_index)


class FedAvgTrainer(LocalTrainer):
    """Global-only; its personalized model is the global model itself."""
    uses_theta = False

    def local_update(self, client, w_in, round_index=0):
        w = local_update_fedavg(client, w_in, self.config, self.spec,
                                round_index)
        return w, client.theta

    def _personal_base(self, client, w, eval_stream):
        return w


class PerFedAvgTrainer(LocalTrainer):
    uses_theta = False

    def local_update(self, client, w_in, round_index=0):
        w = local_update_perfedavg_fo(client, w_in, self.config, self.spec,
                                      round_index)
        return w, client.theta

    def _personal_base(self, client, w, eval_stream):
        # global step size first, personalized step size after
        cfg = self.config
        stepsizes = [cfg.alpha_m, cfg.alpha]
        for step in range(cfg.perfedavg_eval_steps):
            batch = client.sample_batch(cfg.batch_size, eval_stream)
            w = fine_tune(w, self.spec.objective(batch), 1,
                          stepsizes[min(step, 1)])
        return w


def make_trainer(config, spec):
    if config.strategy in PFEDBRED_STRATEGIES:
        return PFedBreDTrainer(config, spec)
    elif config.strategy == 'pfedme':
        return PFedMeTrainer(config, spec)
    elif config.strategy == 'fedavg':
        return FedAvgTrainer(config, spec)
    return PerFedAvgTrainer(config, spec)
