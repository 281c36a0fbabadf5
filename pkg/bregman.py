#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Convex generators, Bregman divergences, the Bregman proximal mapping and
the Bregman-Moreau envelope.

A generator g lives on the natural side, its conjugate g* on the mean
side; mu = grad g(s) and s = grad g*(mu). Every family is separable, i.e.
evaluated coordinate-wise:

  family       g(s)              g*(x)                   mean domain
  gaussian     1/2 |s|^2_Sigma   1/2 |x|^2_Sigma^-1      R
  bernoulli    ln(1 + e^s)       x ln x + (1-x) ln(1-x)  [0, 1]
  poisson      e^s               x ln x - x              [0, inf)
  exponential  -ln(-s), s < 0    -ln x - 1               (0, inf)

The prior regularizer of the personalized problem is lambda * D_g*(theta,
mu), the divergence of the conjugate with both arguments on the mean side.
"""

import numpy
from traits.api import Array, Enum, HasTraits, Instance

from param_space import NonFiniteError, ParamVector, _check_dims
from traitdefs import PositiveFloat


class DomainError(ValueError):
    pass


class ProxDivergenceError(ArithmeticError):
    """The inner gradient descent of the prox produced a non-finite value."""

    def __init__(self, step, msg):
        ArithmeticError.__init__(self, 'prox step %d: %s' % (step, msg))
        self.step = step


def _arr(v):
    if isinstance(v, ParamVector):
        return v.values
    return numpy.atleast_1d(numpy.asarray(v, dtype=numpy.float64))


def _xlogx(x):
    # 0 ln 0 = 0
    safe = numpy.where(x > 0.0, x, 1.0)
    return x * numpy.log(safe)


def _expit(s):
    return 0.5 * (1.0 + numpy.tanh(0.5 * s))


class ConvexGenerator(HasTraits):
    """
    The function g defining a scaled exponential-family prior and the
    Bregman geometry of the personalized regularizer.

    The gaussian family has covariance Sigma = diag(sigma_diag) when
    sigma_diag is given, otherwise scale * I. scale = 1 gives g = g* =
    1/2 |.|^2.
    """
    family = Enum(['gaussian', 'bernoulli', 'poisson', 'exponential'])
    scale = PositiveFloat(1.0)
    # empty means scale * I
    sigma_diag = Array(dtype=numpy.float64, shape=(None,),
                       value=numpy.zeros(0))

    def _sigma(self, dim):
        if self.sigma_diag.size == 0:
            return self.scale
        if self.sigma_diag.size != dim:
            raise DomainError("sigma_diag has %d coordinates, the argument %d"
                              % (self.sigma_diag.size, dim))
        if numpy.any(self.sigma_diag <= 0.0):
            raise DomainError("sigma_diag must be positive")
        return self.sigma_diag

    def _require(self, ok, arr, side):
        if not numpy.all(ok):
            ind = int(numpy.flatnonzero(~ok)[0])
            raise DomainError("%s: coordinate %d = %r is outside the %s "
                              "domain" % (self.family, ind, float(arr[ind]),
                                          side))

    def check_natural(self, s):
        s = _arr(s)
        self._require(numpy.isfinite(s), s, 'natural')
        if self.family == 'exponential':
            self._require(s < 0.0, s, 'natural')
        return s

    def check_mean(self, x, interior=True):
        """
        interior=False admits the boundary points where g* is still
        finite (0 and 1 for bernoulli, 0 for poisson).
        """
        x = _arr(x)
        self._require(numpy.isfinite(x), x, 'mean')
        if self.family == 'bernoulli':
            if interior:
                ok = (x > 0.0) & (x < 1.0)
            else:
                ok = (x >= 0.0) & (x <= 1.0)
            self._require(ok, x, 'mean')
        elif self.family == 'poisson':
            self._require(x > 0.0 if interior else x >= 0.0, x, 'mean')
        elif self.family == 'exponential':
            self._require(x > 0.0, x, 'mean')
        return x

    def g(self, s):
        s = self.check_natural(s)
        if self.family == 'gaussian':
            return 0.5 * float(numpy.sum(self._sigma(s.size) * s * s))
        elif self.family == 'bernoulli':
            return float(numpy.sum(numpy.logaddexp(0.0, s)))
        elif self.family == 'poisson':
            return float(numpy.sum(numpy.exp(s)))
        return float(numpy.sum(-numpy.log(-s)))

    def grad_g(self, s):
        s = self.check_natural(s)
        if self.family == 'gaussian':
            return self._sigma(s.size) * s
        elif self.family == 'bernoulli':
            return _expit(s)
        elif self.family == 'poisson':
            return numpy.exp(s)
        return -1.0 / s

    def g_conj(self, x):
        x = self.check_mean(x, interior=False)
        if self.family == 'gaussian':
            return 0.5 * float(numpy.sum(x * x / self._sigma(x.size)))
        elif self.family == 'bernoulli':
            return float(numpy.sum(_xlogx(x) + _xlogx(1.0 - x)))
        elif self.family == 'poisson':
            return float(numpy.sum(_xlogx(x) - x))
        return float(numpy.sum(-numpy.log(x) - 1.0))

    def grad_g_conj(self, x):
        x = self.check_mean(x)
        if self.family == 'gaussian':
            return x / self._sigma(x.size)
        elif self.family == 'bernoulli':
            return numpy.log(x) - numpy.log1p(-x)
        elif self.family == 'poisson':
            return numpy.log(x)
        return -1.0 / x

    def hess_g_conj_diag(self, x):
        x = self.check_mean(x)
        if self.family == 'gaussian':
            return numpy.ones_like(x) / self._sigma(x.size)
        elif self.family == 'bernoulli':
            return 1.0 / (x * (1.0 - x))
        elif self.family == 'poisson':
            return 1.0 / x
        return 1.0 / (x * x)


class PriorSpec(HasTraits):
    """Scaled exponential-family prior; lam doubles as the regularization
    weight of the personalized problem."""
    generator = Instance(ConvexGenerator, ())
    lam = PositiveFloat(15.0)


def grad_g(gen, s):
    return ParamVector._adopt(gen.grad_g(s))


def grad_g_conj(gen, x):
    return ParamVector._adopt(gen.grad_g_conj(x))


def divergence(gen, x, y, coords='mean'):
    """
    D_g*(x, y) = g*(x) - g*(y) - <grad g*(y), x - y>.

    x is a mean-domain point. y is a mean-domain point for coords='mean'
    and a natural-domain point (mapped through grad g first) for
    coords='natural'.
    """
    x = _arr(x)
    if coords == 'natural':
        m = gen.grad_g(y)
    elif coords == 'mean':
        m = _arr(y)
    else:
        raise ValueError("coords must be 'mean' or 'natural', got %r"
                         % coords)
    if x.size != m.size:
        raise DomainError("Dimension mismatch: %d vs %d" % (x.size, m.size))
    val = gen.g_conj(x) - gen.g_conj(m) - float(
        numpy.dot(gen.grad_g_conj(m), x - m))
    # rounding only; the exact value is >= 0
    return max(val, 0.0)


def table_divergence(gen, x, y):
    """
    Closed forms of D_g*(x, y) with x on the mean side and y on the
    natural side. For gaussian the natural point maps to Sigma y, so with
    Sigma = I this is 1/2 |x - y|^2. For bernoulli with binary x the
    expression equals ln(1 + e^((1-2x) y)).
    """
    x = gen.check_mean(x, interior=False)
    y = gen.check_natural(y)
    if x.size != y.size:
        raise DomainError("Dimension mismatch: %d vs %d" % (x.size, y.size))
    if gen.family == 'gaussian':
        sigma = gen._sigma(x.size)
        diff = x - sigma * y
        return 0.5 * float(numpy.sum(diff * diff / sigma))
    elif gen.family == 'bernoulli':
        return float(numpy.sum(numpy.logaddexp(0.0, y) - x * y
                               + _xlogx(x) + _xlogx(1.0 - x)))
    elif gen.family == 'poisson':
        return float(numpy.sum(numpy.exp(y) + _xlogx(x) - x * (y + 1.0)))
    ratio = -x * y
    return float(numpy.sum(ratio - numpy.log(ratio) - 1.0))


class SmoothLoss(object):
    """
    A differentiable objective over ParamVectors: value(p) -> float and
    gradient(p) -> ParamVector.
    """

    def value(self, params):
        raise NotImplementedError

    def gradient(self, params):
        raise NotImplementedError

    def __call__(self, params):
        return self.value(params)


class ZeroLoss(SmoothLoss):

    def value(self, params):
        return 0.0

    def gradient(self, params):
        return ParamVector.zeros(params.dim)


class QuadraticLoss(SmoothLoss):
    """1/2 |theta - center|^2"""

    def __init__(self, center):
        self.center = ParamVector(center)

    def value(self, params):
        diff = params.values - self.center.values
        return 0.5 * float(numpy.dot(diff, diff))

    def gradient(self, params):
        _check_dims(params, self.center)
        return ParamVector._adopt(params.values - self.center.values)


def prox_objective(spec, loss, anchor, theta):
    """loss(theta) + lam * D_g*(theta, anchor)"""
    return loss.value(theta) + spec.lam * divergence(spec.generator, theta,
                                                     anchor)


def bregman_prox(spec, loss, anchor, inner_steps, inner_step_size,
                 start=None):
    """
    Approximates argmin_theta { loss(theta) + lam * D_g*(theta, anchor) }
    with exactly inner_steps plain gradient steps of size inner_step_size,
    starting at start (the anchor when not given).
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1, got %r" % inner_steps)
    if not inner_step_size > 0.0:
        raise ValueError("inner_step_size must be > 0, got %r"
                         % inner_step_size)
    gen = spec.generator
    lam = spec.lam
    anchor_nat = gen.grad_g_conj(anchor)
    if start is None:
        start = anchor
    _check_dims(start, anchor)
    theta = start
    for step in range(1, inner_steps + 1):
        try:
            grad = loss.gradient(theta).values
        except NonFiniteError as err:
            raise ProxDivergenceError(step, str(err))
        try:
            reg = gen.grad_g_conj(theta.values) - anchor_nat
        except DomainError as err:
            raise ProxDivergenceError(step, str(err))
        update = theta.values - inner_step_size * (grad + lam * reg)
        if not numpy.all(numpy.isfinite(update)):
            raise ProxDivergenceError(step, "non-finite inner gradient")
        theta = ParamVector._adopt(update)
    return theta


def envelope_value(spec, loss, anchor, inner_steps, inner_step_size,
                   start=None):
    theta = bregman_prox(spec, loss, anchor, inner_steps, inner_step_size,
                         start)
    return prox_objective(spec, loss, anchor, theta)


def envelope_gradient(spec, loss, anchor, prox_result):
    """
    lam * Hess g*(anchor) [anchor - prox_result] for gaussian priors, where
    the Hessian is Sigma^-1. Other families use the identity Hessian (the
    first-order path).

    loss is the objective prox_result was solved for; the gradient only
    depends on it through prox_result.
    """
    _check_dims(anchor, prox_result)
    diff = anchor.values - prox_result.values
    gen = spec.generator
    if gen.family == 'gaussian':
        diff = diff / gen._sigma(diff.size)
    return ParamVector._adopt(spec.lam * diff)
