#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Local loss functions f_i: a multinomial logistic regression (mclr) and a
two-layer leaky-ReLU network (dnn), both with softmax output, mean
negative log-likelihood loss and hand-written exact gradients.

Parameter layout inside the flat ParamVector (all row-major):

  mclr: W (input_dim x num_classes), b (num_classes)
  dnn:  W1 (input_dim x hidden_dim), b1 (hidden_dim),
        W2 (hidden_dim x num_classes), b2 (num_classes)
"""

import numpy
from traits.api import Enum, HasTraits, Str

from bregman import SmoothLoss
from param_space import DimensionError, InitScheme, ParamVector, seeded_init
from traitdefs import FiniteFloat, PositiveInt


class LabelRangeError(ValueError):
    pass


class ModelSpec(HasTraits):
    kind = Enum(['mclr', 'dnn'])
    input_dim = PositiveInt(784)
    num_classes = PositiveInt(10)
    hidden_dim = PositiveInt(100)
    leaky_slope = FiniteFloat(0.01)
    # empty means the per-kind default, see init_scheme()
    init = Str('')

    @property
    def parameter_count(self):
        if self.kind == 'mclr':
            return (self.input_dim + 1) * self.num_classes
        return ((self.input_dim + 1) * self.hidden_dim
                + (self.hidden_dim + 1) * self.num_classes)

    def init_scheme(self):
        if self.init:
            return InitScheme.parse(self.init)
        if self.kind == 'mclr':
            return InitScheme(kind='zeros')
        return InitScheme(kind='normal', sigma=0.05)

    def objective(self, batch):
        """The batch loss as a SmoothLoss."""
        return BatchObjective(self, batch)


class Batch(object):
    """
    inputs -- (n, input_dim) feature matrix
    labels -- (n,) integer class indices
    """

    __slots__ = ('inputs', 'labels')

    def __init__(self, inputs, labels):
        inputs = numpy.asarray(inputs, dtype=numpy.float64)
        labels = numpy.asarray(labels, dtype=numpy.int64)
        if inputs.ndim != 2 or labels.ndim != 1:
            raise DimensionError("Batch needs a matrix of inputs and a vector"
                                 " of labels, got shapes %s and %s"
                                 % (inputs.shape, labels.shape))
        if inputs.shape[0] != labels.shape[0]:
            raise DimensionError("Batch has %d input rows but %d labels"
                                 % (inputs.shape[0], labels.shape[0]))
        if not numpy.all(numpy.isfinite(inputs)):
            raise ValueError("Batch features must be finite")
        self.inputs = inputs
        self.labels = labels

    def __len__(self):
        return self.labels.shape[0]


def _unpack(spec, params):
    values = params.values
    if values.size != spec.parameter_count:
        raise DimensionError("Model %s expects %d parameters, got %d"
                             % (spec.kind, spec.parameter_count, values.size))
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == 'mclr':
        w = values[:d * c].reshape(d, c)
        b = values[d * c:]
        return w, b
    h = spec.hidden_dim
    ofs = 0
    w1 = values[ofs:ofs + d * h].reshape(d, h)
    ofs += d * h
    b1 = values[ofs:ofs + h]
    ofs += h
    w2 = values[ofs:ofs + h * c].reshape(h, c)
    ofs += h * c
    b2 = values[ofs:]
    return w1, b1, w2, b2


def _check_labels(spec, labels):
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        bad = labels[(labels < 0) | (labels >= spec.num_classes)][0]
        raise LabelRangeError("Label %d outside [0, %d)"
                              % (bad, spec.num_classes))


def _forward(spec, params, inputs):
    """Returns the logits and the cache needed by the backward pass."""
    if inputs.shape[1] != spec.input_dim:
        raise DimensionError("Inputs have %d features, model expects %d"
                             % (inputs.shape[1], spec.input_dim))
    if spec.kind == 'mclr':
        w, b = _unpack(spec, params)
        return inputs.dot(w) + b, None
    w1, b1, w2, b2 = _unpack(spec, params)
    pre = inputs.dot(w1) + b1
    hidden = numpy.where(pre > 0.0, pre, spec.leaky_slope * pre)
    return hidden.dot(w2) + b2, (pre, hidden)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - numpy.log(numpy.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec, params, inputs):
    return _forward(spec, params, numpy.asarray(inputs,
                                                dtype=numpy.float64))[0]


def per_example_loss(spec, params, inputs, labels):
    """Negative log-likelihood of each row."""
    labels = numpy.asarray(labels, dtype=numpy.int64)
    _check_labels(spec, labels)
    logp = _log_softmax(logits(spec, params, inputs))
    return -logp[numpy.arange(labels.size), labels]


def forward_loss(spec, params, batch):
    """Mean negative log-likelihood over the batch."""
    return float(per_example_loss(spec, params, batch.inputs,
                                  batch.labels).mean())


def gradient(spec, params, batch):
    _check_labels(spec, batch.labels)
    z, cache = _forward(spec, params, batch.inputs)
    n = len(batch)
    dz = numpy.exp(_log_softmax(z))
    dz[numpy.arange(n), batch.labels] -= 1.0
    dz /= n
    if spec.kind == 'mclr':
        return ParamVector._adopt(numpy.concatenate(
            (batch.inputs.T.dot(dz).ravel(), dz.sum(axis=0))))
    pre, hidden = cache
    w1, b1, w2, b2 = _unpack(spec, params)
    dhidden = dz.dot(w2.T)
    dpre = dhidden * numpy.where(pre > 0.0, 1.0, spec.leaky_slope)
    return ParamVector._adopt(numpy.concatenate(
        (batch.inputs.T.dot(dpre).ravel(), dpre.sum(axis=0),
         hidden.T.dot(dz).ravel(), dz.sum(axis=0))))


def predict(spec, params, inputs):
    """argmax of the logits per row; ties go to the lowest class index"""
    return numpy.argmax(logits(spec, params, inputs), axis=1)


def init_params(spec, stream):
    return seeded_init(spec.parameter_count, stream, spec.init_scheme())


class BatchObjective(SmoothLoss):
    """The batch loss of one model as a SmoothLoss for the prox solver."""

    def __init__(self, spec, batch):
        self.spec = spec
        self.batch = batch

    def value(self, params):
        return forward_loss(self.spec, params, self.batch)

    def gradient(self, params):
        return gradient(self.spec, params, self.batch)


def finite_difference(value_fn, params, coords, h=1e-5):
    """
    Central differences of value_fn at params along the given coordinates.
    """
    base = params.to_array()
    result = numpy.empty(len(coords))
    for k, ind in enumerate(coords):
        orig = base[ind]
        base[ind] = orig + h
        plus = value_fn(ParamVector(base))
        base[ind] = orig - h
        minus = value_fn(ParamVector(base))
        base[ind] = orig
        result[k] = (plus - minus) / (2.0 * h)
    return result


def finite_difference_check(spec, params, batch, coords, h=1e-5):
    """
    Returns the largest relative error between the analytic gradient and
    central differences of forward_loss over coords.
    """
    analytic = gradient(spec, params, batch).values[list(coords)]
    numeric = finite_difference(
        lambda p: forward_loss(spec, p, batch), params, coords, h)
    scale = numpy.maximum(numpy.abs(analytic) + numpy.abs(numeric), 1e-8)
    return float(numpy.max(numpy.abs(analytic - numeric) / scale))
