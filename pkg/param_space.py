#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Dense parameter vectors and the seeded random streams every other module
draws from.

All model parameters (global w, personalized theta, prior means, gradients)
are flattened into one ParamVector. Values are double precision and
read-only once constructed.

Random streams use numpy's counter-based Philox generator keyed by
SeedSequence(seed, spawn_key=(stream_id, ...)), so a stream is fully
determined by (seed, stream_id, path) and its call sequence.
"""

import re

import numpy
from numpy.random import Generator, Philox, SeedSequence

from traits.api import Enum, HasTraits, TraitError

from traitdefs import FiniteFloat

# stream ids; client i uses CLIENT_STREAM_BASE + i
SERVER_STREAM = 0
DATA_STREAM = 1
PARTITION_STREAM = 2
INIT_STREAM = 3
CLIENT_STREAM_BASE = 1000
# first path element of derived client streams
EVAL_PATH = 1


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class InitSchemeError(ValueError):
    pass


class ParamVector(object):
    """
    Immutable flat vector of finite float64 coefficients.
    """

    __slots__ = ('_values',)

    def __init__(self, values):
        arr = numpy.array(values, dtype=numpy.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise DimensionError("A parameter vector must be one dimensional "
                                 "and non-empty, got shape %s" % (arr.shape,))
        _check_finite(arr)
        arr.flags.writeable = False
        self._values = arr

    @classmethod
    def _adopt(cls, arr):
        # takes ownership of a freshly computed array without copying
        _check_finite(arr)
        arr.flags.writeable = False
        vec = cls.__new__(cls)
        vec._values = arr
        return vec

    @classmethod
    def zeros(cls, dim):
        return cls._adopt(numpy.zeros(dim, dtype=numpy.float64))

    @property
    def values(self):
        return self._values

    @property
    def dim(self):
        return self._values.size

    def to_array(self):
        """Returns a writable copy of the coefficients."""
        return self._values.copy()

    def max_abs_diff(self, other):
        _check_dims(self, other)
        return float(numpy.max(numpy.abs(self._values - other.values)))

    def __len__(self):
        return self._values.size

    def __getitem__(self, ind):
        return self._values[ind]

    def __iter__(self):
        return iter(self._values.tolist())

    def __add__(self, other):
        return linear_combine([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return linear_combine([(1.0, self), (-1.0, other)])

    def __mul__(self, scalar):
        return linear_combine([(float(scalar), self)])

    __rmul__ = __mul__

    def __neg__(self):
        return linear_combine([(-1.0, self)])

    def __repr__(self):
        return 'ParamVector(%s)' % numpy.array2string(self._values,
                                                      separator=', ')


def _check_finite(arr):
    if not numpy.all(numpy.isfinite(arr)):
        bad = int(numpy.flatnonzero(~numpy.isfinite(arr))[0])
        raise NonFiniteError("Non-finite coefficient %r at index %d"
                             % (float(arr[bad]), bad))


def _check_dims(first, second):
    if first.dim != second.dim:
        raise DimensionError("Dimension mismatch: %d vs %d"
                             % (first.dim, second.dim))


def linear_combine(terms):
    """
    Coefficient-wise sum of a_i * v_i over a non-empty list of
    (scalar, ParamVector) pairs. The inputs are not modified.
    """
    if not terms:
        raise ValueError("linear_combine needs at least one term")
    first_coef, first = terms[0]
    acc = float(first_coef) * first.values
    for coef, vec in terms[1:]:
        _check_dims(first, vec)
        acc += float(coef) * vec.values
    return ParamVector._adopt(acc)


def norm_sq(v):
    return float(numpy.dot(v.values, v.values))


class RngStream(object):
    """
    One independent random stream. The server, the data pipeline and every
    client own their own stream; derived streams (e.g. per-round evaluation
    batches) are obtained with substream().
    """

    def __init__(self, seed, stream_id, path=()):
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("Seed must be a 64-bit unsigned integer, got %d"
                             % seed)
        self.seed = seed
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        key = (self.stream_id,) + self.path
        self.generator = Generator(Philox(SeedSequence(seed, spawn_key=key)))

    def substream(self, *index):
        return RngStream(self.seed, self.stream_id, self.path + index)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc, scale, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, size, replace=False):
        return self.generator.choice(n, size=size, replace=replace)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size)

    def __repr__(self):
        return 'RngStream(seed=%d, stream_id=%d, path=%s)' % (
            self.seed, self.stream_id, self.path)


def client_stream(seed, client_id):
    return RngStream(seed, CLIENT_STREAM_BASE + client_id)


_SCHEME_PATTERN = re.compile(r'^\s*(zeros|uniform|normal)\s*'
                             r'(?:\(\s*([^,\s]+)\s*,\s*([^,\s\)]+)\s*\))?\s*$')


class InitScheme(HasTraits):
    """
    zeros | uniform(low, high) | normal(0, sigma)
    """
    kind = Enum(['zeros', 'uniform', 'normal'])
    low = FiniteFloat(-0.1)
    high = FiniteFloat(0.1)
    sigma = FiniteFloat(0.01)

    @classmethod
    def parse(cls, text):
        m = _SCHEME_PATTERN.match(text)
        if m is None:
            raise InitSchemeError("Cannot parse initialization scheme %r"
                                  % text)
        kind, first, second = m.groups()
        if kind == 'zeros' and first is not None:
            raise InitSchemeError("zeros takes no arguments")
        try:
            if first is None:
                scheme = cls(kind=kind)
            elif kind == 'uniform':
                scheme = cls(kind=kind, low=float(first), high=float(second))
            else:
                mean = float(first)
                scheme = cls(kind=kind, sigma=float(second))
        except (ValueError, TraitError) as err:
            raise InitSchemeError("Invalid scheme %r: %s" % (text, err))
        if kind == 'normal' and first is not None and mean != 0.0:
            raise InitSchemeError("Only zero-mean normal initialization is "
                                  "supported, got mean %r" % mean)
        scheme.check()
        return scheme

    def check(self):
        if self.kind == 'uniform' and self.high <= self.low:
            raise InitSchemeError("uniform(a, b) needs b > a, got (%r, %r)"
                                  % (self.low, self.high))
        if self.kind == 'normal' and self.sigma <= 0.0:
            raise InitSchemeError("normal(0, sigma) needs sigma > 0, got %r"
                                  % self.sigma)

    def __str__(self):
        if self.kind == 'uniform':
            return 'uniform(%r, %r)' % (self.low, self.high)
        elif self.kind == 'normal':
            return 'normal(0, %r)' % self.sigma
        return 'zeros'


def seeded_init(dim, stream, scheme='zeros'):
    """
    Draws an initial parameter vector. The zeros scheme does not consume
    the stream.
    """
    if dim < 1:
        raise DimensionError("dim must be >= 1, got %d" % dim)
    if not isinstance(scheme, InitScheme):
        scheme = InitScheme.parse(scheme)
    scheme.check()
    if scheme.kind == 'zeros':
        return ParamVector.zeros(dim)
    elif scheme.kind == 'uniform':
        return ParamVector._adopt(stream.uniform(scheme.low, scheme.high,
                                                 dim))
    return ParamVector._adopt(stream.normal(0.0, scheme.sigma, dim))
