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

"""
Plots the loss terms of a training run from its JSON-lines log.

Usage:
python oneoffs/training_curve.py --log=models/model-train.jsonl

Smooth over 20 steps and write the plots to plots/
python oneoffs/training_curve.py --log=... --window=20 --plot_dir=plots
"""
import sys
sys.path.insert(0, '.')

import os.path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
from absl import app, flags

import utils

flags.DEFINE_string("log", None, "JSON-lines training log written by train.")
flags.DEFINE_string("plot_dir", "data", "Where to save the plots.")
flags.DEFINE_integer("window", 1, "Rolling mean window, in steps.")

flags.mark_flag_as_required('log')

FLAGS = flags.FLAGS


def load_log(path):
    """Joint-phase records as a DataFrame indexed by step.

    Exit-head-only records ({step, bce}) are dropped.
    """
    df = pd.DataFrame(utils.read_jsonl(path))
    if df.empty or 'all' not in df:
        raise ValueError('%s holds no joint training records' % path)
    df = df[df['all'].notna()]
    # A resumed run appends; keep the latest record of each step.
    return df.drop_duplicates('step', keep='last').set_index('step').sort_index()


def smooth(df, window):
    return df.rolling(window, min_periods=1).mean() if window > 1 else df


def save_plots(data_dir, df):
    """Writes total_loss.pdf, stage_losses.pdf and exit_bce.pdf; returns paths."""
    utils.ensure_dir_exists(data_dir)
    paths = []

    plt.figure()
    plt.plot(df.index, df["all"])
    plt.xlabel("Step")
    plt.ylabel("L_all")
    plt.title("Joint objective")
    paths.append(os.path.join(data_dir, "total_loss.pdf"))
    plt.savefig(paths[-1])

    plt.figure()
    for column in [c for c in df.columns if c.startswith("tot")]:
        plt.plot(df.index, df[column], label="stage " + column[3:])
    plt.xlabel("Step")
    plt.ylabel("Style + content")
    plt.legend()
    plt.title("Per-stage losses")
    paths.append(os.path.join(data_dir, "stage_losses.pdf"))
    plt.savefig(paths[-1])

    plt.figure()
    for column in [c for c in df.columns if c.startswith("bce")]:
        plt.plot(df.index, df[column], label="stage " + column[3:])
    plt.xlabel("Step")
    plt.ylabel("BCE")
    plt.legend()
    plt.title("Exit head")
    paths.append(os.path.join(data_dir, "exit_bce.pdf"))
    plt.savefig(paths[-1])
    plt.close('all')
    return paths


def main(unusedargv):
    df = smooth(load_log(FLAGS.log), FLAGS.window)
    for path in save_plots(FLAGS.plot_dir, df):
        print("Wrote", path)


if __name__ == "__main__":
    app.run(main)
