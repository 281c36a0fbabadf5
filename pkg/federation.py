#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
The outer loop of the federated training: client sampling, local training
of the clients, aggregation of the sampled updates with momentum beta and
the evaluation cadence.
"""

import logging
import math

import numpy
from tqdm import tqdm
from traits.api import Bool, Enum, HasTraits, Instance, Int, Range

from algorithms import make_trainer
from metrics import evaluate_round
from models import init_params
from param_space import (EVAL_PATH, INIT_STREAM, SERVER_STREAM, ParamVector,
                         RngStream, client_stream, linear_combine)
from traitdefs import PositiveFloat, PositiveInt

logger = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class ClientTrainingError(RuntimeError):

    def __init__(self, client_id, cause):
        RuntimeError.__init__(self, 'client %d: %s' % (client_id, cause))
        self.client_id = client_id
        self.cause = cause


class RoundConfig(HasTraits):
    T = PositiveInt(100)
    R = PositiveInt(20)
    sample_ratio = Range(low=0.0, high=1.0, value=1.0, exclude_low=True)
    beta = PositiveFloat(1.0)
    aggregation_weighting = Enum(['by_data_count', 'uniform'])
    # Algorithm-literal default: every client trains, the sample only
    # decides which updates are aggregated
    train_only_sampled = Bool(False)
    eval_every = PositiveInt(1)

    def eval_rounds(self):
        return [t for t in range(1, self.T + 1)
                if t % self.eval_every == 0 or t == self.T]


class ClientState(object):
    """
    The running context of one client. theta and memorized_w persist
    across rounds whether or not the client is sampled.
    """

    def __init__(self, client_id, dataset, train_indices, test_indices, w0,
                 rng):
        self.client_id = client_id
        self.dataset = dataset
        self.train_indices = numpy.asarray(train_indices, dtype=numpy.int64)
        self.test_indices = numpy.asarray(test_indices, dtype=numpy.int64)
        self.theta = w0
        self.memorized_w = w0
        self.rng = rng

    @property
    def n_train(self):
        return self.train_indices.size

    @property
    def n_test(self):
        return self.test_indices.size

    def eval_stream(self, round_index):
        return self.rng.substream(EVAL_PATH, round_index)

    def sample_batch(self, batch_size, stream=None):
        """
        min(batch_size, n_train) distinct training examples drawn from
        stream, the client's own training stream by default.
        """
        if self.n_train == 0:
            raise ValueError("Client %d has no training data"
                             % self.client_id)
        stream = self.rng if stream is None else stream
        picks = stream.choice(self.n_train, min(batch_size, self.n_train))
        return self.dataset.batch(self.train_indices[picks])

    def __repr__(self):
        return 'ClientState(%d, n_train=%d, n_test=%d)' % (
            self.client_id, self.n_train, self.n_test)


class ServerState(HasTraits):
    w = Instance(ParamVector)
    t = Int(0)


def sample_clients(N, sample_ratio, stream):
    """
    ceil(N * sample_ratio) distinct client ids drawn uniformly without
    replacement, in increasing order. The full federation is returned
    without consuming the stream.
    """
    if not 0.0 < sample_ratio <= 1.0:
        raise ValueError("sample_ratio must lie in (0, 1], got %r"
                         % sample_ratio)
    m = min(N, max(1, int(math.ceil(N * sample_ratio - 1e-9))))
    if m == N:
        return list(range(N))
    return sorted(int(i) for i in stream.choice(N, m))


def aggregate(prev_w, updates, beta):
    """
    (1 - beta) prev_w + beta * sum_i p_i u_i for updates = [(weight_i,
    u_i), ...] with p the weights normalized to sum one.
    """
    if not updates:
        raise AggregationError("No updates to aggregate")
    weights = numpy.array([float(weight) for weight, _ in updates])
    if numpy.any(weights < 0.0) or not numpy.all(numpy.isfinite(weights)):
        raise AggregationError("Aggregation weights must be finite and "
                               "non-negative")
    total = weights.sum()
    if total <= 0.0:
        raise AggregationError("Aggregation weights sum to zero")
    mean = linear_combine([(weight / total, u)
                           for weight, (_, u) in zip(weights, updates)])
    if beta == 1.0:
        return mean
    return linear_combine([(1.0 - beta, prev_w), (beta, mean)])


def _weight(client, config):
    if config.aggregation_weighting == 'uniform':
        return 1.0
    return float(client.n_train)


def run_round(server, clients, trainer, config, server_stream):
    """
    One global round: sample, train locally, aggregate the sampled
    updates. Client states are updated in place; returns the new
    ServerState and the sampled ids.
    """
    t = server.t + 1
    sampled = sample_clients(len(clients), config.sample_ratio, server_stream)
    training = sampled if config.train_only_sampled else range(len(clients))
    updates = {}
    # fixed client-id order
    for cid in training:
        client = clients[cid]
        try:
            w_out, theta_out = trainer.local_update(client, server.w, t)
        except Exception as err:
            raise ClientTrainingError(cid, err) from err
        client.theta = theta_out
        client.memorized_w = w_out
        updates[cid] = w_out
    new_w = aggregate(server.w, [(_weight(clients[cid], config),
                                  updates[cid]) for cid in sampled],
                      config.beta)
    logger.debug("Round %d aggregated %d of %d clients", t, len(sampled),
                 len(clients))
    return ServerState(w=new_w, t=t), sampled


class TrainingResult(object):

    def __init__(self, server, clients, history, trajectory):
        self.server = server
        self.clients = clients
        # EvalReports in round order
        self.history = history
        # ServerState per round, starting at t = 0 (empty unless kept)
        self.trajectory = trajectory


class FederationRunner(object):
    """
    Sets up the server, the clients and the trainer of one experiment and
    runs the T global rounds.
    """

    def __init__(self, dataset, partition, model_spec, trainer_config,
                 round_config, seed, progress=True, deviation='final'):
        self.dataset = dataset
        self.partition = partition.check(dataset)
        self.model_spec = model_spec
        self.round_config = round_config
        self.seed = seed
        self.progress = progress
        # 'final', 'every' or 'none'
        self.deviation = deviation
        config = trainer_config.clone_traits()
        config.R = round_config.R
        self.trainer = make_trainer(config, model_spec)

    def setup(self):
        w0 = init_params(self.model_spec, RngStream(self.seed, INIT_STREAM))
        clients = [ClientState(i, self.dataset,
                               self.partition.train_indices(i),
                               self.partition.test_indices(i), w0,
                               client_stream(self.seed, i))
                   for i in range(self.partition.num_clients)]
        return ServerState(w=w0, t=0), clients

    def evaluate(self, server, clients, with_deviation):
        personal = [self.trainer.personalized_model(
            client, server.w, client.eval_stream(server.t))
            for client in clients]
        return evaluate_round(server.t, server.w, personal, self.dataset,
                              self.partition, self.model_spec,
                              with_deviation)

    def run_training(self, keep_trajectory=False, on_eval=None):
        cfg = self.round_config
        server, clients = self.setup()
        server_stream = RngStream(self.seed, SERVER_STREAM)
        eval_rounds = set(cfg.eval_rounds())
        history = []
        trajectory = [server] if keep_trajectory else []
        logger.info("Training %s: %d clients, %d rounds, %d parameters",
                    self.trainer.name, len(clients), cfg.T,
                    self.model_spec.parameter_count)
        rounds = tqdm(range(1, cfg.T + 1), desc=self.trainer.name,
                      disable=not self.progress, leave=False)
        for t in rounds:
            server, _ = run_round(server, clients, self.trainer, cfg,
                                  server_stream)
            if keep_trajectory:
                trajectory.append(server)
            if t in eval_rounds:
                with_deviation = (self.deviation == 'every' or
                                  (self.deviation == 'final' and t == cfg.T))
                report = self.evaluate(server, clients, with_deviation)
                history.append(report)
                rounds.set_postfix(global_acc='%.4f' % report.global_acc,
                                   personal_acc='%.4f'
                                   % report.personalized_acc)
                if on_eval is not None:
                    on_eval(report)
        return TrainingResult(server, clients, history, trajectory)
