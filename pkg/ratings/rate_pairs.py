# Copyright 2019 Google LLC
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


import sys
sys.path.insert(0, '.')

from absl import app

import csv

import numpy as np

from ratings import math_ratings

CSV_FIELDS = ['method_a', 'method_b', 'wins_a', 'wins_b']


def _parse_count(value, where):
    try:
        count = float(value)
    except (TypeError, ValueError):
        raise math_ratings.RatingError('%s: bad count %r' % (where, value))
    if count < 0 or not np.isfinite(count):
        raise math_ratings.RatingError('%s: bad count %r' % (where, value))
    return count


def read_counts(path):
    """Reads method_a,method_b,wins_a,wins_b rows into PairwiseCounts.

    Repeated pairs (in either order) accumulate; methods are numbered in order
    of first appearance.
    """
    methods = []
    rows = []
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise math_ratings.RatingError('%s: missing columns %s' % (
                path, ', '.join(sorted(missing))))
        for line_no, row in enumerate(reader, start=2):
            where = '%s:%d' % (path, line_no)
            a, b = row['method_a'].strip(), row['method_b'].strip()
            if a == b:
                raise math_ratings.RatingError('%s: %s compared with itself' % (where, a))
            for name in (a, b):
                if name not in methods:
                    methods.append(name)
            rows.append((a, b, _parse_count(row['wins_a'], where),
                         _parse_count(row['wins_b'], where)))
    index = {m: i for i, m in enumerate(methods)}
    wins = np.zeros((len(methods), len(methods)))
    for a, b, wins_a, wins_b in rows:
        wins[index[a], index[b]] += wins_a
        wins[index[b], index[a]] += wins_b
    return math_ratings.PairwiseCounts(methods, wins)


def write_counts(counts, path):
    """One row per compared pair, i < j."""
    wins = np.asarray(counts.wins)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CSV_FIELDS)
        n = len(counts.methods)
        for i in range(n):
            for j in range(i + 1, n):
                if wins[i, j] or wins[j, i]:
                    writer.writerow([counts.methods[i], counts.methods[j],
                                     '%g' % wins[i, j], '%g' % wins[j, i]])


def format_ratings(scores, counts=None):
    """Aligned table of scores, strongest first, with W/L records if counts given."""
    HEADER = "{:<25s}{:>10s}{:>8s}{:>10}{:>9}-{:<8}"
    ROW = "{:<25.23s}{:>10.4f}{:>8.0f}{:>10.0f}{:>9.0f}-{:<8.0f}"
    elo = math_ratings.to_elo(scores.scores)
    order = np.argsort(-np.asarray(scores.scores), kind='stable')
    if counts is None:
        lines = ["{:<25s}{:>10s}{:>8s}".format("Method", "Score", "Elo")]
        for i in order:
            lines.append("{:<25.23s}{:>10.4f}{:>8.0f}".format(
                scores.methods[i], scores.scores[i], elo[i]))
        return '\n'.join(lines)

    wins, losses = counts.total_wins, counts.total_losses
    lines = ["{:.0f} comparisons among {} methods".format(
        np.asarray(counts.wins).sum(), len(counts.methods)), '',
        HEADER.format("Method", "Score", "Elo", "Games", "Win", "Loss")]
    for i in order:
        lines.append(ROW.format(scores.methods[i], scores.scores[i], elo[i],
                                wins[i] + losses[i], wins[i], losses[i]))
    return '\n'.join(lines)


def fancyprint_ratings(scores, counts=None):
    print(format_ratings(scores, counts))


def main(argv):
    """Read the pairwise CSV given in argv, fit B-T scores, print them."""
    if len(argv) < 2:
        print("Usage: rate_pairs.py <pairwise counts csv>")
        return 1
    counts = read_counts(argv[1])
    if not counts.methods:
        print("No comparisons found in", argv[1])
        return 1
    scores = math_ratings.bt_fit(counts)
    fancyprint_ratings(scores, counts.validate())
    return 0


if __name__ == '__main__':
    app.run(main)
