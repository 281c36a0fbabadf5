#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Local and global test evaluation and the per-class loss deviation of the
personalized models.

Local test: every client's model on its own test shard, aggregated with
weights n_i / sum(n). Global test: a model on the pooled test data of all
clients.
"""

import logging

import numpy
from traits.api import Array, Float, HasTraits, Instance, Int, List

from models import per_example_loss, predict

logger = logging.getLogger(__name__)


class LossDeviation(HasTraits):
    """
    L[i, c] -- mean loss of model i on client i's own test data of class c,
               0 when the client has none
    G[i, c] -- mean loss of model i on the pooled test data of class c
    counts[i, c] -- test examples of class c held by client i
    L_bar[c] -- counts-weighted mean of L[:, c]
    G_bar[c] -- unweighted mean of G[:, c] over the models
    dL, dG -- L - L_bar and G - G_bar
    absent_classes -- classes without test data in the federation; their
                      columns are zero
    """
    L = Array(dtype=numpy.float64, shape=(None, None))
    G = Array(dtype=numpy.float64, shape=(None, None))
    counts = Array(dtype=numpy.int64, shape=(None, None))
    L_bar = Array(dtype=numpy.float64, shape=(None,))
    G_bar = Array(dtype=numpy.float64, shape=(None,))
    dL = Array(dtype=numpy.float64, shape=(None, None))
    dG = Array(dtype=numpy.float64, shape=(None, None))
    absent_classes = List(Int)

    def rows(self):
        """(client, class, L, G, dL, dG) in client-major order"""
        n_clients, n_classes = self.L.shape
        for i in range(n_clients):
            for c in range(n_classes):
                yield (i, c, self.L[i, c], self.G[i, c], self.dL[i, c],
                       self.dG[i, c])


class EvalReport(HasTraits):
    round = Int(0)
    global_acc = Float
    global_loss = Float
    # weighted local-test aggregates of the personalized models
    personalized_acc = Float
    personalized_loss = Float
    client_acc = Array(dtype=numpy.float64, shape=(None,))
    client_loss = Array(dtype=numpy.float64, shape=(None,))
    weights = Array(dtype=numpy.float64, shape=(None,))
    deviation = Instance(LossDeviation)


def _accuracy_and_loss(spec, params, inputs, labels):
    acc = float(numpy.mean(predict(spec, params, inputs) == labels))
    loss = float(per_example_loss(spec, params, inputs, labels).mean())
    return acc, loss


def weighted_aggregate(values, counts):
    counts = numpy.asarray(counts, dtype=numpy.float64)
    return float(numpy.dot(counts / counts.sum(), values))


def local_test(models, dataset, partition, spec):
    """
    Evaluates models[i] on client i's test shard. Clients with an empty
    shard get NaN metrics and weight zero. Returns (accuracies, losses,
    weights, aggregate accuracy, aggregate loss).
    """
    if len(models) != partition.num_clients:
        raise ValueError("%d models for %d clients"
                         % (len(models), partition.num_clients))
    acc = numpy.full(len(models), numpy.nan)
    loss = numpy.full(len(models), numpy.nan)
    counts = numpy.zeros(len(models))
    for i, params in enumerate(models):
        test = partition.test_indices(i)
        if test.size == 0:
            logger.warning("Client %d has no test data and is left out of "
                           "the local test", i)
            continue
        acc[i], loss[i] = _accuracy_and_loss(spec, params,
                                             dataset.features[test],
                                             dataset.labels[test])
        counts[i] = test.size
    if counts.sum() == 0:
        raise ValueError("No client has test data")
    weights = counts / counts.sum()
    held = counts > 0
    return (acc, loss, weights, weighted_aggregate(acc[held], counts[held]),
            weighted_aggregate(loss[held], counts[held]))


def global_test(model, dataset, pool, spec):
    """Accuracy and mean loss of one model on the pooled test indices."""
    pool = numpy.asarray(pool, dtype=numpy.int64)
    if pool.size == 0:
        raise ValueError("The global test pool is empty")
    return _accuracy_and_loss(spec, model, dataset.features[pool],
                              dataset.labels[pool])


def _class_means(losses, labels, num_classes):
    sums = numpy.bincount(labels, weights=losses, minlength=num_classes)
    counts = numpy.bincount(labels, minlength=num_classes)
    means = numpy.zeros(num_classes)
    held = counts > 0
    means[held] = sums[held] / counts[held]
    return means, counts


def loss_deviation(models, dataset, partition, spec):
    n_clients = partition.num_clients
    num_classes = dataset.num_classes
    pool = partition.test_pool()
    pool_x, pool_y = dataset.features[pool], dataset.labels[pool]
    L = numpy.zeros((n_clients, num_classes))
    G = numpy.zeros((n_clients, num_classes))
    counts = numpy.zeros((n_clients, num_classes), dtype=numpy.int64)
    for i, params in enumerate(models):
        test = partition.test_indices(i)
        if test.size:
            labels = dataset.labels[test]
            L[i], counts[i] = _class_means(
                per_example_loss(spec, params, dataset.features[test], labels),
                labels, num_classes)
        G[i], _ = _class_means(per_example_loss(spec, params, pool_x, pool_y),
                               pool_y, num_classes)
    totals = counts.sum(axis=0)
    absent = [int(c) for c in numpy.flatnonzero(totals == 0)]
    for c in absent:
        logger.warning("Class %d has no test data; its deviation columns "
                       "are zero", c)
    L_bar = numpy.zeros(num_classes)
    held = totals > 0
    L_bar[held] = (counts[:, held] * L[:, held]).sum(axis=0) / totals[held]
    G_bar = G.mean(axis=0)
    dL = L - L_bar
    dG = G - G_bar
    dL[:, absent] = 0.0
    dG[:, absent] = 0.0
    return LossDeviation(L=L, G=G, counts=counts, L_bar=L_bar, G_bar=G_bar,
                         dL=dL, dG=dG, absent_classes=absent)


def evaluate_round(round_index, global_model, personal_models, dataset,
                   partition, spec, with_deviation=True):
    global_acc, global_loss = global_test(global_model, dataset,
                                          partition.test_pool(), spec)
    acc, loss, weights, p_acc, p_loss = local_test(personal_models, dataset,
                                                   partition, spec)
    report = EvalReport(round=round_index, global_acc=global_acc,
                        global_loss=global_loss, personalized_acc=p_acc,
                        personalized_loss=p_loss, client_acc=acc,
                        client_loss=loss, weights=weights)
    if with_deviation:
        report.deviation = loss_deviation(personal_models, dataset,
                                          partition, spec)
    logger.info("Round %d: global acc %.4f loss %.4f, personalized acc %.4f "
                "loss %.4f", round_index, global_acc, global_loss, p_acc,
                p_loss)
    return report
