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
"""Miscellaneous utilities"""

from contextlib import contextmanager
import json
import logging
import os
import sys
import time


def dbg(*objects, file=sys.stderr, flush=True, **kwargs):
    "Helper function to print to stderr and flush"
    print(*objects, file=file, flush=flush, **kwargs)


def ensure_dir_exists(directory):
    "Creates local directories if they don't exist."
    if not directory:
        return
    if not os.path.exists(directory):
        dbg("Making dir {}".format(directory))
    os.makedirs(directory, exist_ok=True)


def write_json(obj, path, pretty=True):
    "Writes obj as JSON via a temp file, so readers never see a partial file."
    ensure_dir_exists(os.path.dirname(path))
    tmp_path = path + '.tmp'
    with open(tmp_path, 'w') as f:
        json.dump(obj, f, indent=2 if pretty else None)
        f.write('\n')
    os.replace(tmp_path, path)


def append_jsonl(f, record):
    "Appends one record to an open JSON-lines file and flushes it."
    f.write(json.dumps(record) + '\n')
    f.flush()


def read_jsonl(path):
    "Returns the records of a JSON-lines file, skipping blank lines."
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except ValueError as e:
                raise ValueError('%s:%d: bad JSON: %s' % (path, lineno, e))
    return records


@contextmanager
def logged_timer(message):
    "Context manager for timing snippets of code. Echos to logging module."
    tick = time.time()
    yield
    tock = time.time()
    logging.info("%s: %.3f seconds", message, (tock - tick))
