#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Command line front end of the simulator: experiment files, single runs,
hyperparameter sweeps and the CSV and binary outputs.

  pfedbred run <config>
  pfedbred sweep <config> --param <section.key> --values v1,v2 [...]
  pfedbred validate <config>

An experiment file is a sectioned text file ([dataset], [model],
[trainer], [federation], [experiment]) of "key = value" lines; "#" starts
a comment. Keys not set fall back to the shipped pfedbred.ini.
"""

import argparse
import codecs
import configparser
import csv
import itertools
import logging
import os
import re
import struct
import sys

import numpy
from traits.api import (Bool, Enum, HasTraits, Instance, Range, Str,
                        TraitError, Union)

from algorithms import TrainerConfig, TrainerConfigError
from data import (load_idx, partition_dirichlet, partition_iid,
                  partition_label_skew, synth_generate)
from federation import FederationRunner, RoundConfig
from models import ModelSpec
from param_space import (DATA_STREAM, PARTITION_STREAM, InitScheme,
                         InitSchemeError, ParamVector, RngStream)
from traitdefs import (NonNegativeFloat, NonNegativeInt, PositiveFloat,
                       PositiveInt)

logger = logging.getLogger('pfedbred')

OUTPUT_ROOT_ENV = 'PFEDBRED_OUTPUT_ROOT'
INI_FILE = 'pfedbred.ini'
LOG_FILE = 'pfedbred_stderr.log'
RESOLVED_CONFIG = 'resolved_config.ini'
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'sweep_summary.csv'
METRICS_HEADER = ['round', 'algo', 'seed', 'global_acc', 'global_loss',
                  'personalized_acc', 'personalized_loss']
DEVIATION_HEADER = ['client', 'class', 'L', 'G', 'dL', 'dG']
SUMMARY_HEADER = ['param', 'value', 'final_global_acc',
                  'final_personalized_acc', 'best_personalized_acc']
# 16-byte header: magic, uint64 dim; then little-endian float64 values
MODEL_MAGIC = b'PFBRDVEC'


class ConfigError(ValueError):

    def __init__(self, msg, key=None, line=None):
        where = ''
        if line is not None:
            where += 'line %d: ' % line
        if key is not None:
            where += '%s: ' % key
        ValueError.__init__(self, where + msg)
        self.key = key
        self.line = line


class DatasetConfig(HasTraits):
    source = Enum(['synthetic', 'idx'])
    images = Str('')
    labels = Str('')
    limit = Union(None, PositiveInt())
    num_classes = PositiveInt(10)
    examples_per_class = PositiveInt(100)
    input_dim = PositiveInt(60)
    class_separation = NonNegativeFloat(2.0)
    partition = Enum(['label_skew', 'dirichlet', 'iid'])
    k = PositiveInt(3)
    dirichlet_alpha = PositiveFloat(0.5)
    min_samples = NonNegativeInt(4)
    num_clients = PositiveInt(20)
    train_fraction = Range(low=0.0, high=1.0, value=0.75, exclude_low=True)


class ExperimentSettings(HasTraits):
    seed = NonNegativeInt(0)
    output_dir = Str('output')
    progress = Bool(True)
    deviation_every_eval = Bool(False)


class ExperimentConfig(HasTraits):
    dataset = Instance(DatasetConfig, ())
    model = Instance(ModelSpec, ())
    trainer = Instance(TrainerConfig, ())
    federation = Instance(RoundConfig, ())
    experiment = Instance(ExperimentSettings, ())

    def check(self):
        ds = self.dataset
        if ds.source == 'idx':
            for key in ('images', 'labels'):
                path = getattr(ds, key)
                if not path:
                    raise ConfigError("an idx source needs a file name",
                                      'dataset.' + key)
                if not os.path.exists(path):
                    raise ConfigError("file %s does not exist" % path,
                                      'dataset.' + key)
        elif ds.partition == 'label_skew' and ds.k > ds.num_classes:
            raise ConfigError("%d classes per client but only %d classes"
                              % (ds.k, ds.num_classes), 'dataset.k')
        if self.model.init:
            try:
                InitScheme.parse(self.model.init)
            except InitSchemeError as err:
                raise ConfigError(str(err), 'model.init')
        try:
            self.trainer.check()
        except TrainerConfigError as err:
            raise ConfigError(str(err), 'trainer.' + _KEYS[('trainer',
                                                            err.trait)])
        return self


def _bool(text):
    low = text.strip().lower()
    if low in ('true', 'yes', 'on', '1'):
        return True
    if low in ('false', 'no', 'off', '0'):
        return False
    raise ValueError("%r is not a boolean" % text)


def _optional(convert):
    def parse(text):
        if text.strip().lower() in ('', 'none'):
            return None
        return convert(text)
    return parse


# section -> [(key, trait name, converter)], in file order
SCHEMA = {
    'dataset': [
        ('source', 'source', str),
        ('images', 'images', str),
        ('labels', 'labels', str),
        ('limit', 'limit', _optional(int)),
        ('num_classes', 'num_classes', int),
        ('examples_per_class', 'examples_per_class', int),
        ('input_dim', 'input_dim', int),
        ('class_separation', 'class_separation', float),
        ('partition', 'partition', str),
        ('k', 'k', int),
        ('dirichlet_alpha', 'dirichlet_alpha', float),
        ('min_samples', 'min_samples', int),
        ('num_clients', 'num_clients', int),
        ('train_fraction', 'train_fraction', float),
    ],
    'model': [
        ('kind', 'kind', str),
        ('hidden_dim', 'hidden_dim', int),
        ('leaky_slope', 'leaky_slope', float),
        ('init', 'init', str),
    ],
    'trainer': [
        ('strategy', 'strategy', str),
        ('lambda', 'lam', float),
        ('eta', 'eta', float),
        ('eta_alpha', 'eta_alpha', float),
        ('alpha_m', 'alpha_m', float),
        ('alpha', 'alpha', float),
        ('K', 'K', int),
        ('batch_size', 'batch_size', int),
        ('ft_enabled', 'ft_enabled', _bool),
        ('ft_steps', 'ft_steps', int),
        ('memorized_outer_step', 'memorized_outer_step', _bool),
        ('eta_tilde_alpha', 'eta_tilde_alpha', _optional(float)),
        ('eta_tilde', 'eta_tilde', _optional(float)),
        ('perfedavg_eval_steps', 'perfedavg_eval_steps', int),
        ('prior_family', 'prior_family', str),
        ('prior_scale', 'prior_scale', float),
    ],
    'federation': [
        ('T', 'T', int),
        ('R', 'R', int),
        ('sample_ratio', 'sample_ratio', float),
        ('beta', 'beta', float),
        ('aggregation_weighting', 'aggregation_weighting', str),
        ('train_only_sampled', 'train_only_sampled', _bool),
        ('eval_every', 'eval_every', int),
    ],
    'experiment': [
        ('seed', 'seed', int),
        ('output_dir', 'output_dir', str),
        ('progress', 'progress', _bool),
        ('deviation_every_eval', 'deviation_every_eval', _bool),
    ],
}
_FIELDS = dict(((section, key), (trait, convert))
               for section, fields in SCHEMA.items()
               for key, trait, convert in fields)
# (section, trait name) -> key
_KEYS = dict(((section, trait), key)
             for section, fields in SCHEMA.items()
             for key, trait, _ in fields)

_SECTION = re.compile(r'^\[(\w+)\]$')
_ENTRY = re.compile(r'^([\w.]+)\s*=\s*(.*)$')


def set_value(cfg, dotted, text, line=None):
    """Converts text and assigns it to the field named section.key."""
    section, _, key = dotted.partition('.')
    if (section, key) not in _FIELDS:
        raise ConfigError("unknown key", dotted, line)
    trait, convert = _FIELDS[(section, key)]
    try:
        value = convert(text.strip())
    except ValueError as err:
        raise ConfigError("cannot convert %r: %s" % (text.strip(), err),
                          dotted, line)
    try:
        setattr(getattr(cfg, section), trait, value)
    except TraitError as err:
        raise ConfigError(str(err), dotted, line)


def _parse_lines(lines, cfg):
    """Applies the lines to cfg; returns the set of dotted keys seen."""
    section = None
    seen = set()
    linecount = 0
    for line in lines:
        linecount += 1
        text = line.split('#', 1)[0].strip()
        if not text:
            continue
        m = _SECTION.match(text)
        if m is not None:
            section = m.group(1)
            if section not in SCHEMA:
                raise ConfigError("unknown section [%s]" % section,
                                  line=linecount)
            continue
        m = _ENTRY.match(text)
        if m is None:
            raise ConfigError("expected 'key = value', got %r" % text,
                              line=linecount)
        key, value = m.groups()
        if '.' not in key:
            if section is None:
                raise ConfigError("key outside of a section", key, linecount)
            key = '%s.%s' % (section, key)
        if key in seen:
            raise ConfigError("key given twice", key, linecount)
        seen.add(key)
        set_value(cfg, key, value, linecount)
    return seen


def _ini_path():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), INI_FILE)


def read_ini(inipath=None):
    cfg = configparser.ConfigParser(interpolation=None)
    # keep T, R and K upper case
    cfg.optionxform = str
    inipath = _ini_path() if inipath is None else inipath
    if os.path.exists(inipath):
        with codecs.open(inipath, 'r', 'utf8') as f:
            cfg.read_file(f)
    else:
        logger.debug("%s not found, using built-in defaults", inipath)
    return cfg


def about_text(inipath=None):
    ini = read_ini(inipath)
    if not ini.has_option('about', 'text'):
        return ''
    return ini.get('about', 'text').replace('\\n', '\n')


def apply_defaults(cfg, inipath=None):
    ini = read_ini(inipath)
    for section in ini.sections():
        if section == 'about':
            continue
        for key, value in ini.items(section):
            try:
                set_value(cfg, '%s.%s' % (section, key), value)
            except ConfigError as err:
                raise ConfigError("%s (in %s)" % (err, INI_FILE))
    return cfg


def _resolve_paths(cfg, basedir):
    for key in ('images', 'labels'):
        path = getattr(cfg.dataset, key)
        if path and not os.path.isabs(path):
            setattr(cfg.dataset, key,
                    os.path.normpath(os.path.join(basedir, path)))


def parse_config(path, inipath=None):
    """
    Reads an experiment file on top of the shipped defaults and
    validates it. trainer.strategy and at least one dataset key are
    required. Relative IDX paths are taken relative to the file.
    """
    cfg = apply_defaults(ExperimentConfig(), inipath)
    with codecs.open(path, 'r', 'utf8') as f:
        seen = _parse_lines(f, cfg)
    if 'trainer.strategy' not in seen:
        raise ConfigError("missing required key", 'trainer.strategy')
    if not any(key.startswith('dataset.') for key in seen):
        raise ConfigError("missing [dataset] block")
    _resolve_paths(cfg, os.path.dirname(os.path.abspath(path)))
    return cfg.check()


def parse_config_text(text, inipath=None):
    cfg = apply_defaults(ExperimentConfig(), inipath)
    _parse_lines(text.splitlines(), cfg)
    return cfg.check()


def _format(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg):
    """Every key of the schema, in schema order."""
    lines = ['# resolved pfedbred experiment']
    for section, fields in SCHEMA.items():
        block = getattr(cfg, section)
        lines.append('')
        lines.append('[%s]' % section)
        for key, trait, _ in fields:
            lines.append('%s = %s' % (key, _format(getattr(block, trait))))
    return '\n'.join(lines) + '\n'


def copy_config(cfg):
    clone = ExperimentConfig()
    _parse_lines(serialize_config(cfg).splitlines(), clone)
    return clone


def resolve_output_dir(cfg):
    out = cfg.experiment.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def save_model(path, params):
    values = numpy.asarray(params.values, dtype='<f8')
    with open(path, 'wb') as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack('<Q', values.size))
        f.write(values.tobytes())


def load_model(path):
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError("%s is not a model dump" % path)
    if len(raw) < 16:
        raise ValueError("%s: truncated header" % path)
    dim = struct.unpack('<Q', raw[8:16])[0]
    if len(raw) != 16 + 8 * dim:
        raise ValueError("%s: %d coefficients declared, file has %d bytes"
                         % (path, dim, len(raw)))
    return ParamVector(numpy.frombuffer(raw, dtype='<f8', count=dim,
                                        offset=16))


def build_dataset(cfg):
    ds_cfg = cfg.dataset
    seed = cfg.experiment.seed
    if ds_cfg.source == 'idx':
        dataset = load_idx(ds_cfg.images, ds_cfg.labels, ds_cfg.num_classes,
                           ds_cfg.limit)
    else:
        dataset = synth_generate(ds_cfg.num_classes,
                                 ds_cfg.examples_per_class, ds_cfg.input_dim,
                                 ds_cfg.class_separation,
                                 RngStream(seed, DATA_STREAM))
    stream = RngStream(seed, PARTITION_STREAM)
    if ds_cfg.partition == 'label_skew':
        partition = partition_label_skew(dataset, ds_cfg.num_clients,
                                         ds_cfg.k, ds_cfg.train_fraction,
                                         stream)
    elif ds_cfg.partition == 'dirichlet':
        partition = partition_dirichlet(dataset, ds_cfg.num_clients,
                                        ds_cfg.dirichlet_alpha,
                                        ds_cfg.min_samples, stream,
                                        ds_cfg.train_fraction)
    else:
        partition = partition_iid(dataset, ds_cfg.num_clients,
                                  ds_cfg.train_fraction, stream)
    return dataset, partition


def build_model_spec(cfg, dataset):
    spec = cfg.model.clone_traits()
    spec.input_dim = dataset.input_dim
    spec.num_classes = dataset.num_classes
    return spec


def _write_deviation(out_dir, report):
    path = os.path.join(out_dir, 'deviation_round_%d.csv' % report.round)
    with open(path, 'w', encoding='utf8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(DEVIATION_HEADER)
        for client, cls, L, G, dL, dG in report.deviation.rows():
            writer.writerow([client, cls, repr(float(L)), repr(float(G)),
                             repr(float(dL)), repr(float(dG))])
    if report.deviation.absent_classes:
        logger.warning("Classes without test data in %s: %s", path,
                       report.deviation.absent_classes)


def _execute(cfg, out_dir):
    """
    One experiment into out_dir: resolved config, metrics.csv, deviation
    CSVs and the final model dumps. Returns the TrainingResult.
    """
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, LOG_FILE), 'w',
                                  encoding='utf8')
    handler.setFormatter(logging.Formatter(
        '%(asctime)s %(levelname)s %(name)s: %(message)s'))
    logging.getLogger().addHandler(handler)
    try:
        with codecs.open(os.path.join(out_dir, RESOLVED_CONFIG), 'w',
                         'utf8') as f:
            f.write(serialize_config(cfg))
        dataset, partition = build_dataset(cfg)
        spec = build_model_spec(cfg, dataset)
        settings = cfg.experiment
        runner = FederationRunner(
            dataset, partition, spec, cfg.trainer, cfg.federation,
            settings.seed,
            progress=settings.progress and sys.stderr.isatty(),
            deviation='every' if settings.deviation_every_eval else 'final')
        algo = cfg.trainer.strategy
        with open(os.path.join(out_dir, METRICS_FILE), 'w', encoding='utf8',
                  newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(METRICS_HEADER)

            def on_eval(report):
                writer.writerow([report.round, algo, settings.seed,
                                 repr(report.global_acc),
                                 repr(report.global_loss),
                                 repr(report.personalized_acc),
                                 repr(report.personalized_loss)])
                f.flush()
                if report.deviation is not None:
                    _write_deviation(out_dir, report)

            result = runner.run_training(on_eval=on_eval)
        save_model(os.path.join(out_dir, 'model_global.bin'),
                   result.server.w)
        for client in result.clients:
            personal = runner.trainer.personalized_model(
                client, result.server.w, client.eval_stream(result.server.t))
            save_model(os.path.join(out_dir, 'model_client_%d.bin'
                                    % client.client_id), personal)
        logger.info("Results written to %s", out_dir)
        return result
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def run_experiment(cfg, output_dir=None):
    """
    Returns 0 on success and 2 when training aborted. Configuration and
    I/O errors are raised.
    """
    out_dir = resolve_output_dir(cfg) if output_dir is None else output_dir
    try:
        _execute(cfg, out_dir)
    except (ArithmeticError, RuntimeError) as err:
        logger.error("Training aborted: %s", err)
        return 2
    return 0


def run_sweep(cfg, sweeps, output_dir=None):
    """
    Runs the Cartesian grid of sweeps = [(section.key, [values]), ...],
    one subdirectory per point, and writes sweep_summary.csv. A point that
    fails, an invalid value included, gets a row of 'failed'. Returns the
    summary rows.
    """
    if not sweeps:
        raise ConfigError("nothing to sweep")
    for param, values in sweeps:
        section, _, key = param.partition('.')
        if (section, key) not in _FIELDS:
            raise ConfigError("unknown sweep parameter", param)
        if not values:
            raise ConfigError("empty value list", param)
    names = ';'.join(param for param, _ in sweeps)
    combos = list(itertools.product(*[values for _, values in sweeps]))
    out_dir = resolve_output_dir(cfg) if output_dir is None else output_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for n, combo in enumerate(combos):
        label = ';'.join(str(v) for v in combo)
        point_dir = os.path.abspath(os.path.join(out_dir, 'point_%03d' % n))
        logger.info("Sweep point %d/%d: %s = %s", n + 1, len(combos), names,
                    label)
        try:
            point = copy_config(cfg)
            for (param, _), value in zip(sweeps, combo):
                set_value(point, param, str(value))
            point.check()
            point.experiment.output_dir = point_dir
            history = _execute(point, point_dir).history
            rows.append([names, label, repr(history[-1].global_acc),
                         repr(history[-1].personalized_acc),
                         repr(max(r.personalized_acc for r in history))])
        except Exception as err:
            logger.warning("Sweep point %s = %s failed: %s", names, label,
                           err)
            rows.append([names, label, 'failed', 'failed', 'failed'])
    with open(os.path.join(out_dir, SUMMARY_FILE), 'w', encoding='utf8',
              newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)
    return rows


def _parse_sweeps(params, values):
    if len(params) != len(values):
        raise ConfigError("every --param needs its own --values")
    return [(param, [v.strip() for v in vals.split(',') if v.strip()])
            for param, vals in zip(params, values)]


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog='pfedbred', description='Personalized federated learning '
        'simulator', epilog=about_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command')
    commands.required = True
    run = commands.add_parser('run', help='run one experiment')
    run.add_argument('config')
    sweep = commands.add_parser('sweep', help='run a hyperparameter grid')
    sweep.add_argument('config')
    sweep.add_argument('--param', action='append', required=True,
                       help='dotted key, e.g. trainer.lambda')
    sweep.add_argument('--values', action='append', required=True,
                       help='comma separated values')
    validate = commands.add_parser('validate',
                                   help='print the resolved configuration')
    validate.add_argument('config')
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        cfg = parse_config(args.config)
        if args.command == 'validate':
            sys.stdout.write(serialize_config(cfg))
            return 0
        elif args.command == 'run':
            return run_experiment(cfg)
        rows = run_sweep(cfg, _parse_sweeps(args.param, args.values))
        return 1 if any(row[2] == 'failed' for row in rows) else 0
    except ConfigError as err:
        logger.error("Invalid configuration: %s", err)
    except (IOError, OSError) as err:
        logger.error("%s", err)
    except ValueError as err:
        # unreadable data files, impossible partitions
        logger.error("%s", err)
    return 1


if __name__ == '__main__':
    sys.exit(main())
