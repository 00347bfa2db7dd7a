# Copyright 2018 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Command-line entry point.

Usage:
  python propih.py harmonize --model=m.ptw --composite=c.ppm --mask=m.pgm --out_dir=D
  python propih.py train --config=cfg.json --data=manifest.json --out=model.ptw
  python propih.py eval exit-dist --annotations=a.jsonl
  python propih.py eval bt-rank --counts=pairs.csv
  python propih.py eval flops [--config=model.ptw.json]
  python propih.py eval timing --model=m.ptw --data=manifest.json
  python propih.py eval exit-accuracy --model=m.ptw --data=manifest.json --annotations=a.jsonl
  python propih.py synth --n=16 --size=64 --seed=0 --out_dir=D
  python propih.py style-levels --composite=c.ppm --mask=m.pgm --out_dir=D

JSON goes to stdout; --pretty prints tables instead.  Exit code 1 means
invalid input, 2 a runtime failure.
"""

import json
import logging
import os

from absl import app, flags

import composites
import encoder as encoder_lib
import evaluate
import harmonet
import netpbm
import style_levels
import train as train_lib
import utils
from ratings import math_ratings
from ratings import rate_pairs

flags.DEFINE_string('model', None, 'Model weights (.ptw, with a .ptw.json sidecar).')
flags.DEFINE_string('composite', None, 'Composite image (binary PPM).')
flags.DEFINE_string('mask', None, 'Foreground mask (binary PGM).')
flags.DEFINE_string('out_dir', None, 'Where to write images and reports.')
flags.DEFINE_boolean('all_stages', False, 'Write all four stage outputs.')
flags.DEFINE_integer('force_stage', None, 'Output this stage regardless of the exit head.')
flags.DEFINE_float('threshold', None, 'Exit threshold; defaults to the model config.')

flags.DEFINE_string('config', None, 'JSON config: TrainConfig for train, '
                    'HarmonizerConfig for eval flops.')
flags.DEFINE_string('data', None, 'Data manifest (manifest.json).')
flags.DEFINE_string('annotations', None, 'Exit-stage annotations (JSON lines).')
flags.DEFINE_string('out', None, 'Where to write the trained model.')
flags.DEFINE_string('resume', None, 'Checkpoint to continue training from.')

flags.DEFINE_boolean('pretty', False, 'Print tables rather than JSON.')
flags.DEFINE_string('counts', None, 'Pairwise counts CSV: method_a,method_b,wins_a,wins_b.')
flags.DEFINE_enum('method', 'mm', ['mm', 'ilsr'], 'Bradley-Terry estimator.')
flags.DEFINE_float('alpha', 0.0, 'Pseudo-count added to every compared pair.')
flags.DEFINE_integer('repetitions', 10, 'Timing repetitions per stage.')
flags.DEFINE_integer('limit', None, 'Use at most this many samples.')

flags.DEFINE_integer('n', 16, 'Number of synthetic samples.')
flags.DEFINE_integer('size', 64, 'Synthetic image extent; a multiple of 8.')
flags.DEFINE_integer('seed', 0, 'Random seed.')

flags.DEFINE_integer('level', None, 'Encoder stage to match; all four if unset.')
flags.DEFINE_integer('steps', 200, 'Optimization steps per level.')
flags.DEFINE_float('lr', 0.01, 'Pixel learning rate.')
flags.DEFINE_float('content_weight', 1.0, 'Weight of the content term.')
flags.DEFINE_boolean('cumulative', True, 'Match stages 1..level, not level alone.')
flags.DEFINE_integer('base_width', 64, 'Encoder width when no --model is given.')

FLAGS = flags.FLAGS

COMMANDS = ('harmonize', 'train', 'eval', 'synth', 'style-levels')
EVAL_COMMANDS = ('exit-dist', 'bt-rank', 'flops', 'timing', 'exit-accuracy')


class UsageError(ValueError):
    pass


def _require(*names):
    missing = ['--' + n for n in names if FLAGS[n].value is None]
    if missing:
        raise UsageError('missing required flags: %s' % ', '.join(missing))


def _require_files(*paths):
    for path in paths:
        if path and not os.path.exists(path):
            raise FileNotFoundError('no such file: %s' % path)


def _emit(obj, table=None):
    if FLAGS.pretty and table is not None:
        print(table)
    else:
        print(json.dumps(obj, indent=2))


def _load_samples(path):
    samples = composites.load_manifest(path)
    return samples[:FLAGS.limit] if FLAGS.limit is not None else samples


def harmonize():
    _require('model', 'composite', 'mask', 'out_dir')
    _require_files(FLAGS.model, FLAGS.composite, FLAGS.mask)
    if FLAGS.force_stage is not None and not 1 <= FLAGS.force_stage <= 4:
        raise UsageError('--force_stage must be in 1..4, got %d' % FLAGS.force_stage)
    if FLAGS.all_stages and FLAGS.force_stage is not None:
        raise UsageError('--all_stages and --force_stage are exclusive')

    model = harmonet.load_model(FLAGS.model)
    composite = netpbm.load_image(FLAGS.composite)
    mask = netpbm.load_mask(FLAGS.mask)
    if mask.shape[-2:] != composite.shape[-2:]:
        raise ValueError('mask %s and composite %s differ in size' % (
            mask.shape[-2:], composite.shape[-2:]))
    sample = composites.CompositeSample(composite, composite, mask,
                                        os.path.basename(FLAGS.composite))

    forced = FLAGS.force_stage is not None
    if forced:
        result = harmonet.forward(sample, model, num_stages=FLAGS.force_stage,
                                  threshold=FLAGS.threshold)
        exit_stage = FLAGS.force_stage
    else:
        result = harmonet.forward(sample, model, early_exit=not FLAGS.all_stages,
                                  threshold=FLAGS.threshold)
        exit_stage = result.predicted_exit

    utils.ensure_dir_exists(FLAGS.out_dir)
    stages = range(1, len(result.stage_outputs) + 1) if FLAGS.all_stages \
        else [exit_stage]
    for k in stages:
        netpbm.save_image(result.stage_outputs[k - 1].image,
                          os.path.join(FLAGS.out_dir, 'stage_%d.ppm' % k))
    report = {
        'predicted_exit': exit_stage,
        'exit_scores': [float(s) for s in result.exit_scores],
        'warnings': list(result.warnings),
        'forced': forced,
    }
    utils.write_json(report, os.path.join(FLAGS.out_dir, 'result.json'))
    _emit(report)


def train():
    _require('config', 'data', 'out')
    _require_files(FLAGS.config, FLAGS.data, FLAGS.annotations, FLAGS.resume)
    config = train_lib.TrainConfig.from_json(FLAGS.config)
    annotations_path = FLAGS.annotations or config.annotations
    _require_files(annotations_path)

    dataset = composites.load_manifest(FLAGS.data)
    annotations = composites.load_annotations(annotations_path) \
        if annotations_path else []
    out_dir = os.path.dirname(FLAGS.out)
    if not config.checkpoint_dir:
        config = config._replace(checkpoint_dir=out_dir or '.')
    log_path = os.path.splitext(FLAGS.out)[0] + '-train.jsonl'
    utils.ensure_dir_exists(out_dir)

    if FLAGS.resume:
        result = train_lib.resume(FLAGS.resume, dataset, annotations, config, log_path)
    else:
        result = train_lib.train(dataset, annotations, config, log_path=log_path)
    model = result.model
    if config.exit_head_steps:
        train_lib.train_exit_head_only(dataset, annotations, config, model, log_path)
    harmonet.save_model(model, FLAGS.out)
    _emit({'model': FLAGS.out, 'log': log_path, 'steps': config.steps,
           'final': result.log[-1] if result.log else None})


def eval_exit_dist():
    if FLAGS.model:
        _require('data')
        _require_files(FLAGS.model, FLAGS.data)
        model = harmonet.load_model(FLAGS.model)
        stages = [exit_stage for _, exit_stage in evaluate.predict_exits(
            model, _load_samples(FLAGS.data), FLAGS.threshold)]
    else:
        _require('annotations')
        _require_files(FLAGS.annotations)
        stages = composites.load_annotations(FLAGS.annotations)
    histogram = evaluate.exit_histogram(stages)
    _emit(histogram.to_dict(), evaluate.format_histogram(histogram))


def eval_bt_rank():
    _require('counts')
    _require_files(FLAGS.counts)
    counts = rate_pairs.read_counts(FLAGS.counts)
    if FLAGS.method == 'ilsr':
        scores = math_ratings.compute_ratings_ilsr(counts, alpha=FLAGS.alpha)
    else:
        scores = math_ratings.bt_fit(counts, alpha=FLAGS.alpha)
    _emit(scores.to_dict(), rate_pairs.format_ratings(scores, counts.validate()))


def eval_flops():
    _require_files(FLAGS.config)
    if FLAGS.config:
        config = harmonet.HarmonizerConfig.from_json(FLAGS.config)
    else:
        config = harmonet.HarmonizerConfig()
    report = evaluate.count_flops(config)
    obj = report.to_dict()
    fractions = None
    if FLAGS.annotations:
        _require_files(FLAGS.annotations)
        histogram = evaluate.exit_histogram(
            composites.load_annotations(FLAGS.annotations))
        fractions = histogram.fractions
        if fractions is not None:
            obj['expected'] = evaluate.expected_flops(report, fractions)
    _emit(obj, evaluate.format_flops(report, fractions))


def eval_timing():
    _require('model', 'data')
    _require_files(FLAGS.model, FLAGS.data)
    if FLAGS.repetitions < 1:
        raise UsageError('--repetitions must be >= 1')
    model = harmonet.load_model(FLAGS.model)
    samples = _load_samples(FLAGS.data)
    with utils.logged_timer('Timing %d samples' % len(samples)):
        timings = evaluate.time_stages(model, samples, FLAGS.repetitions)
    _emit([t.to_dict() for t in timings], evaluate.format_timings(timings))


def eval_exit_accuracy():
    _require('model', 'data', 'annotations')
    _require_files(FLAGS.model, FLAGS.data, FLAGS.annotations)
    model = harmonet.load_model(FLAGS.model)
    accuracy = evaluate.exit_label_accuracy(
        model, _load_samples(FLAGS.data),
        composites.load_annotations(FLAGS.annotations), FLAGS.threshold)
    table = '\n'.join(['Label accuracy: {:.4f}'.format(accuracy.label_accuracy),
                       'Exit accuracy:  {:.4f}'.format(accuracy.exit_accuracy),
                       '', evaluate.format_histogram(accuracy.histogram)])
    _emit(accuracy.to_dict(), table)


def synth():
    _require('out_dir')
    if FLAGS.size < 8 or FLAGS.size % 8:
        raise UsageError('--size must be a positive multiple of 8, got %d' % FLAGS.size)
    if FLAGS.n < 0:
        raise UsageError('--n must be >= 0, got %d' % FLAGS.n)
    with utils.logged_timer('Synthesizing %d samples' % FLAGS.n):
        samples = composites.synth_dataset(FLAGS.n, FLAGS.size, FLAGS.seed)
    path = composites.write_manifest(samples, FLAGS.out_dir)
    _emit({'manifest': path, 'n': len(samples)})


def style_levels_cmd():
    _require('composite', 'mask', 'out_dir')
    _require_files(FLAGS.composite, FLAGS.mask, FLAGS.model)
    if FLAGS.level is not None and not 1 <= FLAGS.level <= 4:
        raise UsageError('--level must be in 1..4, got %d' % FLAGS.level)
    if FLAGS.steps < 0:
        raise UsageError('--steps must be >= 0')

    if FLAGS.model:
        encoder = harmonet.load_model(FLAGS.model).encoder
    else:
        encoder = encoder_lib.init_weights(FLAGS.base_width, FLAGS.seed)
    composite = netpbm.load_image(FLAGS.composite)
    mask = netpbm.load_mask(FLAGS.mask)
    sample = composites.CompositeSample(composite, composite, mask,
                                        os.path.basename(FLAGS.composite))
    levels = [FLAGS.level] if FLAGS.level else range(1, 5)

    utils.ensure_dir_exists(FLAGS.out_dir)
    report = {}
    for level in levels:
        with utils.logged_timer('Optimizing level %d' % level):
            image, history = style_levels.optimize_composite(
                sample, encoder, level, FLAGS.steps, FLAGS.lr,
                FLAGS.content_weight, FLAGS.cumulative)
        netpbm.save_image(image, os.path.join(FLAGS.out_dir, 'level_%d.ppm' % level))
        report['level_%d' % level] = [r._asdict() for r in history[-1:]]
    utils.write_json(report, os.path.join(FLAGS.out_dir, 'style_levels.json'))
    _emit(report)


_EVAL = {
    'exit-dist': eval_exit_dist,
    'bt-rank': eval_bt_rank,
    'flops': eval_flops,
    'timing': eval_timing,
    'exit-accuracy': eval_exit_accuracy,
}

_COMMANDS = {
    'harmonize': harmonize,
    'train': train,
    'synth': synth,
    'style-levels': style_levels_cmd,
}


def _dispatch(argv):
    if len(argv) < 2 or argv[1] not in COMMANDS:
        raise UsageError('expected one of: %s' % ', '.join(COMMANDS))
    if argv[1] == 'eval':
        if len(argv) < 3 or argv[2] not in EVAL_COMMANDS:
            raise UsageError('eval expects one of: %s' % ', '.join(EVAL_COMMANDS))
        if len(argv) > 3:
            raise UsageError('unexpected arguments: %s' % ' '.join(argv[3:]))
        return _EVAL[argv[2]]()
    if len(argv) > 2:
        raise UsageError('unexpected arguments: %s' % ' '.join(argv[2:]))
    return _COMMANDS[argv[1]]()


def main(argv):
    try:
        _dispatch(argv)
    except UsageError as e:
        utils.dbg('error: %s' % e)
        utils.dbg(__doc__)
        return 1
    except (ValueError, KeyError, OSError) as e:
        utils.dbg('error: %s' % e)
        return 1
    except Exception:  # pylint: disable=broad-except
        logging.exception('%s failed', ' '.join(argv[1:3]))
        return 2
    return 0


if __name__ == '__main__':
    app.run(main)
