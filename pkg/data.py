#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Dataset ingestion (IDX files, synthetic gaussian blobs) and the non-iid
partitioning of a dataset over clients.
"""

import gzip
import logging
import struct
from collections import defaultdict

import numpy
from traits.api import Array, HasTraits, List

from models import Batch
from traitdefs import PositiveInt

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    pass


class Dataset(HasTraits):
    """
    features -- (n, d) matrix scaled to [0, 1]
    labels -- (n,) class indices
    """
    features = Array(dtype=numpy.float64, shape=(None, None))
    labels = Array(dtype=numpy.int64, shape=(None,))
    num_classes = PositiveInt(10)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    def check(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("%d feature rows but %d labels"
                             % (self.features.shape[0], self.labels.shape[0]))
        if self.features.size and (self.features.min() < 0.0
                                   or self.features.max() > 1.0):
            raise ValueError("Features must be scaled to [0, 1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("Labels must lie in [0, %d)" % self.num_classes)
        return self

    def class_counts(self, indices=None):
        labels = self.labels if indices is None else self.labels[indices]
        return numpy.bincount(labels, minlength=self.num_classes)

    def batch(self, indices):
        return Batch(self.features[indices], self.labels[indices])


class Partition(HasTraits):
    """
    client_shards -- one (train indices, test indices) pair per client
    """
    client_shards = List()

    @property
    def num_clients(self):
        return len(self.client_shards)

    def train_indices(self, client_id):
        return self.client_shards[client_id][0]

    def test_indices(self, client_id):
        return self.client_shards[client_id][1]

    def test_pool(self):
        """All clients' test indices: the pool of the global test."""
        return numpy.sort(numpy.concatenate(
            [test for _, test in self.client_shards]))

    def all_indices(self):
        return numpy.concatenate([numpy.concatenate((train, test))
                                  for train, test in self.client_shards])

    def check(self, dataset):
        used = self.all_indices()
        if used.size and (used.min() < 0 or used.max() >= len(dataset)):
            raise PartitionError("Partition refers to indices outside the "
                                 "dataset")
        if numpy.unique(used).size != used.size:
            raise PartitionError("An index is assigned twice")
        return self


def _open_binary(path):
    if str(path).endswith('.gz'):
        return gzip.open(path, 'rb')
    return open(path, 'rb')


def _read_idx(path, magic, ndims):
    """
    Reads an IDX file of unsigned bytes. Layout (big-endian):
    magic (i32), ndims x size (i32), data (u8)
    """
    with _open_binary(path) as f:
        raw = f.read()
    header = 4 * (ndims + 1)
    if len(raw) >= 4:
        found = struct.unpack('>I', raw[:4])[0]
        if found != magic:
            raise IdxMagicError("%s: magic number 0x%08x, expected 0x%08x"
                                % (path, found, magic))
    if len(raw) < header:
        raise IdxTruncatedError("%s: header needs %d bytes, file has %d"
                                % (path, header, len(raw)))
    dims = struct.unpack('>' + 'I' * ndims, raw[4:header])
    expected = int(numpy.prod(dims))
    if len(raw) - header < expected:
        raise IdxTruncatedError("%s: %d data bytes declared, %d present"
                                % (path, expected, len(raw) - header))
    data = numpy.frombuffer(raw, dtype=numpy.uint8, count=expected,
                            offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, limit=None):
    """
    Loads an IDX image/label file pair (plain or gzipped). Images are
    flattened row-major and scaled by 1/255. limit keeps the first n
    examples.
    """
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError("%s has %d images but %s has %d labels"
                                    % (images_path, images.shape[0],
                                       labels_path, labels.shape[0]))
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    features = images.reshape(images.shape[0], -1).astype(numpy.float64)
    features /= 255.0
    labels = labels.astype(numpy.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    logger.info("Loaded %d examples of dimension %d from %s",
                features.shape[0], features.shape[1], images_path)
    return Dataset(features=features, labels=labels,
                   num_classes=num_classes).check()


def synth_generate(num_classes, examples_per_class, input_dim,
                   class_separation, stream):
    """
    Gaussian blobs with unit variance around per-class means placed at
    distance class_separation from the origin in random directions. The
    features are min-max scaled to [0, 1] afterwards (a per-feature affine
    map, which preserves linear separability).
    """
    if num_classes < 1 or examples_per_class < 1 or input_dim < 1:
        raise ValueError("All counts must be >= 1")
    directions = stream.normal(0.0, 1.0, (num_classes, input_dim))
    norms = numpy.sqrt((directions * directions).sum(axis=1, keepdims=True))
    means = class_separation * directions / numpy.maximum(norms, 1e-12)
    labels = numpy.repeat(numpy.arange(num_classes, dtype=numpy.int64),
                          examples_per_class)
    features = means[labels] + stream.normal(0.0, 1.0,
                                             (labels.size, input_dim))
    low = features.min(axis=0)
    span = features.max(axis=0) - low
    span[span <= 0.0] = 1.0
    features = numpy.clip((features - low) / span, 0.0, 1.0)
    return Dataset(features=features, labels=labels,
                   num_classes=num_classes).check()


def _split_train_test(client_indices, train_fraction, stream):
    shards = []
    for indices in client_indices:
        indices = numpy.asarray(indices, dtype=numpy.int64)
        indices = indices[stream.permutation(indices.size)]
        n = indices.size
        n_train = int(round(n * train_fraction))
        if n >= 2 and train_fraction < 1.0:
            n_train = min(max(n_train, 1), n - 1)
        shards.append((numpy.sort(indices[:n_train]),
                       numpy.sort(indices[n_train:])))
    return Partition(client_shards=shards)


def _check_fraction(train_fraction):
    if not 0.0 < train_fraction <= 1.0:
        raise PartitionError("train_fraction must lie in (0, 1], got %r"
                             % train_fraction)


def partition_label_skew(ds, num_clients, k_classes_per_client,
                         train_fraction, stream):
    """
    Client i receives the classes (i*k + j) mod C, j = 0..k-1. Each class
    is shuffled and dealt as evenly as integer division allows among the
    clients that hold it.
    """
    k = k_classes_per_client
    if k < 1 or k > ds.num_classes:
        raise PartitionError("k = %d classes per client, dataset has %d "
                             "classes" % (k, ds.num_classes))
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    _check_fraction(train_fraction)
    holders = defaultdict(list)
    for client in range(num_clients):
        for j in range(k):
            holders[(client * k + j) % ds.num_classes].append(client)
    client_indices = [[] for _ in range(num_clients)]
    for cls in range(ds.num_classes):
        members = numpy.flatnonzero(ds.labels == cls)
        members = members[stream.permutation(members.size)]
        clients = holders[cls]
        if not clients:
            continue
        if members.size < len(clients):
            raise PartitionError("Class %d has %d examples for %d clients"
                                 % (cls, members.size, len(clients)))
        for client, part in zip(clients,
                                numpy.array_split(members, len(clients))):
            client_indices[client].extend(part.tolist())
    return _split_train_test(client_indices, train_fraction, stream)


def partition_dirichlet(ds, num_clients, alpha, min_samples, stream,
                        train_fraction=0.75, max_retries=100):
    """
    Per class, client proportions are drawn from Dirichlet(alpha). The
    whole assignment is redrawn until every client holds at least
    min_samples examples, at most max_retries times.
    """
    if not alpha > 0.0:
        raise PartitionError("alpha must be > 0, got %r" % alpha)
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    _check_fraction(train_fraction)
    smallest = 0
    for attempt in range(1, max_retries + 1):
        client_indices = [[] for _ in range(num_clients)]
        for cls in range(ds.num_classes):
            members = numpy.flatnonzero(ds.labels == cls)
            members = members[stream.permutation(members.size)]
            props = stream.dirichlet(numpy.full(num_clients, float(alpha)))
            cuts = (numpy.cumsum(props) * members.size).astype(int)[:-1]
            for client, part in enumerate(numpy.split(members, cuts)):
                client_indices[client].extend(part.tolist())
        smallest = min(len(ind) for ind in client_indices)
        if smallest >= min_samples:
            logger.debug("Dirichlet partition accepted after %d draws",
                         attempt)
            return _split_train_test(client_indices, train_fraction, stream)
    raise PartitionError("No Dirichlet(%r) partition gave every client %d "
                         "examples in %d draws (smallest client: %d)"
                         % (alpha, min_samples, max_retries, smallest))


def partition_iid(ds, num_clients, train_fraction, stream):
    if num_clients < 1 or num_clients > len(ds):
        raise PartitionError("Cannot deal %d examples to %d clients"
                             % (len(ds), num_clients))
    _check_fraction(train_fraction)
    order = stream.permutation(len(ds))
    return _split_train_test(numpy.array_split(order, num_clients),
                             train_fraction, stream)
