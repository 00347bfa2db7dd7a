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

"""Bradley-Terry strengths from pairwise preference counts.

A method i has strength s_i > 0 and is preferred over j with probability
s_i / (s_i + s_j).  Scores are log-strengths centered to zero mean.
"""

from collections import namedtuple, OrderedDict
import logging
import math

import choix
import numpy as np

# "Elo" conversion
ELO_MULT = 400 / math.log(10)


class RatingError(ValueError):
    pass


class DisconnectedGraphError(RatingError):
    def __init__(self, components):
        self.components = components
        super().__init__('comparison graph is disconnected: %s' % ' | '.join(
            ', '.join(c) for c in components))


class PairwiseCounts(namedtuple('PairwiseCounts', ['methods', 'wins'])):
    """wins[i][j] is the number of times methods[i] was preferred over methods[j]."""

    def validate(self):
        wins = np.asarray(self.wins, dtype=np.float64)
        n = len(self.methods)
        if wins.shape != (n, n):
            raise RatingError('wins must be %dx%d for %d methods, got %s' % (
                n, n, n, wins.shape))
        if len(set(self.methods)) != n:
            raise RatingError('duplicate method names: %s' % (self.methods,))
        if not np.all(np.isfinite(wins)) or np.any(wins < 0):
            raise RatingError('win counts must be finite and nonnegative')
        if np.any(np.diag(wins) != 0):
            raise RatingError('a method cannot be compared with itself')
        return PairwiseCounts(list(self.methods), wins)

    @property
    def comparisons(self):
        wins = np.asarray(self.wins, dtype=np.float64)
        return wins + wins.T

    @property
    def total_wins(self):
        return np.asarray(self.wins, dtype=np.float64).sum(axis=1)

    @property
    def total_losses(self):
        return np.asarray(self.wins, dtype=np.float64).sum(axis=0)


class BTScores(namedtuple('BTScores', ['methods', 'scores', 'iterations', 'converged',
                                       'log_likelihoods'])):
    """Centered log-strengths and the log-likelihood after every sweep."""

    def ranking(self):
        """Method names, strongest first."""
        order = np.argsort(-np.asarray(self.scores), kind='stable')
        return [self.methods[i] for i in order]

    def to_dict(self):
        return OrderedDict([
            ('methods', list(self.methods)),
            ('scores', [float(s) for s in self.scores]),
            ('elo', [float(e) for e in to_elo(self.scores)]),
            ('ranking', self.ranking()),
            ('iterations', self.iterations),
            ('converged', self.converged),
            ('log_likelihood', self.log_likelihoods[-1] if self.log_likelihoods
             else None),
        ])


def _reachable(adjacency, start):
    seen = {start}
    frontier = [start]
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(adjacency[i])[0]:
            if j not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return seen


def components(counts):
    """Connected components of the comparison graph, as lists of names."""
    linked = counts.comparisons > 0
    remaining = set(range(len(counts.methods)))
    found = []
    while remaining:
        component = _reachable(linked, min(remaining))
        remaining -= component
        found.append([counts.methods[i] for i in sorted(component)])
    return found


def _check_graph(counts, alpha):
    n = len(counts.methods)
    if n < 2:
        raise RatingError('need at least two methods, got %d' % n)
    never_compared = [m for m, c in zip(counts.methods, counts.comparisons.sum(axis=1))
                      if c == 0]
    if never_compared:
        raise RatingError('methods with no comparisons: %s' % ', '.join(never_compared))
    parts = components(counts)
    if len(parts) > 1:
        raise DisconnectedGraphError(parts)
    if alpha > 0:
        return
    # Without a prior, every method must be reachable from every other
    # through wins; otherwise some strength runs off to 0 or infinity.
    beats = np.asarray(counts.wins) > 0
    if len(_reachable(beats, 0)) < n or len(_reachable(beats.T, 0)) < n:
        never_won = [m for m, w in zip(counts.methods, counts.total_wins) if w == 0]
        never_lost = [m for m, l in zip(counts.methods, counts.total_losses) if l == 0]
        detail = []
        if never_won:
            detail.append('never preferred: %s' % ', '.join(never_won))
        if never_lost:
            detail.append('never beaten: %s' % ', '.join(never_lost))
        raise RatingError('no finite maximum-likelihood strengths (%s); '
                          'use alpha > 0' % ('; '.join(detail) or
                                             'wins split the methods in two groups'))


def _smoothed_wins(counts, alpha):
    wins = np.asarray(counts.wins, dtype=np.float64)
    if alpha:
        wins = wins + alpha * (counts.comparisons > 0)
    return wins


def log_likelihood(counts, scores, alpha=0.0):
    wins = _smoothed_wins(counts, alpha)
    scores = np.asarray(scores, dtype=np.float64)
    diff = scores[:, None] - scores[None, :]
    # log p(i beats j) = -log(1 + exp(-(s_i - s_j)))
    return float(-(wins * np.logaddexp(0.0, -diff)).sum())


def win_probability(scores, i, j):
    return 1.0 / (1.0 + math.exp(-(scores[i] - scores[j])))


def bt_fit(counts, tol=1e-8, max_iter=10000, alpha=0.0):
    """Maximum-likelihood Bradley-Terry scores by minorize-maximize sweeps.

    Every sweep sets s_i = W_i / sum_j n_ij / (s_i + s_j) for all i at once
    and rescales s to unit geometric mean.  Stops once max |delta log s| < tol.

    Args:
      counts: PairwiseCounts.
      alpha: pseudo-count added to both directions of every compared pair.
    Returns:
      BTScores
    """
    counts = counts.validate()
    if alpha < 0:
        raise RatingError('alpha must be >= 0, got %s' % alpha)
    _check_graph(counts, alpha)
    wins = _smoothed_wins(counts, alpha)
    n_ij = wins + wins.T
    w_i = wins.sum(axis=1)

    log_s = np.zeros(len(counts.methods))
    history = [log_likelihood(counts, log_s, alpha)]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        s = np.exp(log_s)
        denom = (n_ij / (s[:, None] + s[None, :])).sum(axis=1)
        new_log_s = np.log(w_i) - np.log(denom)
        new_log_s -= new_log_s.mean()
        delta = np.max(np.abs(new_log_s - log_s))
        log_s = new_log_s
        history.append(log_likelihood(counts, log_s, alpha))
        assert history[-1] >= history[-2] - 1e-9 * (1 + abs(history[-2])), \
            'log-likelihood decreased: %r -> %r' % (history[-2], history[-1])
        if delta < tol:
            converged = True
            break
    if not converged:
        logging.warning('bt_fit: no convergence after %d sweeps', max_iter)
    return BTScores(list(counts.methods), log_s, iterations, converged, history)


def compute_ratings_ilsr(counts, alpha=0.0, max_iter=800, tol=1e-8):
    """The same model fitted by choix's iterative Luce spectral ranking."""
    counts = counts.validate()
    _check_graph(counts, alpha)
    params = choix.ilsr_pairwise_dense(np.asarray(counts.wins, dtype=np.float64),
                                       alpha=alpha, max_iter=max_iter, tol=tol)
    params = np.asarray(params) - np.mean(params)
    return BTScores(list(counts.methods), params, None, True,
                    [log_likelihood(counts, params, alpha)])


def to_elo(scores):
    return ELO_MULT * np.asarray(scores, dtype=np.float64)


def preferences_to_counts(pairs, methods=None):
    """(winner, loser) name pairs -> PairwiseCounts.

    Methods are taken in order of first appearance unless given.
    """
    if methods is None:
        methods = []
        for pair in pairs:
            for name in pair:
                if name not in methods:
                    methods.append(name)
    index = {m: i for i, m in enumerate(methods)}
    wins = np.zeros((len(methods), len(methods)))
    for winner, loser in pairs:
        if winner == loser:
            raise RatingError('%s compared with itself' % winner)
        if winner not in index or loser not in index:
            raise RatingError('unknown method in (%s, %s)' % (winner, loser))
        wins[index[winner], index[loser]] += 1
    return PairwiseCounts(list(methods), wins)
