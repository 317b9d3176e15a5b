#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

"""
Reader for the structured text format shared by architecture manifests and
run configurations.

A specfile is a sequence of ``key: value`` lines. A key followed by a colon
and nothing else opens a section; the indented lines below it are the
section's items. Blank lines and ``#`` comments are ignored.

>>> from spad.specfile import parse
>>> spec = parse('''
... # a tiny example
... name: tiny
... input_shape: 3 16 16
... layers:
...     conv1(3/8)<conv2d>[3x3/1/1] +adapt +prune
...     relu1(8/8)<relu>
... ''')
>>> spec["name"].value
'tiny'
>>> spec["input_shape"].ints()
[3, 16, 16]
>>> [text for lineno, text in spec["layers"].items]
['conv1(3/8)<conv2d>[3x3/1/1] +adapt +prune', 'relu1(8/8)<relu>']
>>> spec["layers"].items[1][0]
7

Errors carry the source name and line number:

>>> parse("name tiny", source="bad.manifest")
Traceback (most recent call last):
...
spad.specfile.SpecfileError: bad.manifest:1: expected 'key: value', got 'name tiny'

"""

import re
from collections import OrderedDict
from io import open

_line_re = re.compile(r'^([A-Za-z_][A-Za-z0-9_\-]*)\s*:\s*(.*?)\s*$')


class SpecfileError(ValueError):
    """Raised when structured text cannot be parsed or holds a bad value."""
    def __init__(self, msg, lineno=None, source=None):
        super(SpecfileError, self).__init__(msg)
        self.msg = msg
        self.lineno = lineno
        self.source = source

    def __str__(self):
        where = self.source or "<string>"
        if self.lineno:
            return "%s:%u: %s" % (where, self.lineno, self.msg)
        return "%s: %s" % (where, self.msg)


class Entry(object):
    """
    One top-level key. Scalar keys have a :attr:`value`; section keys have
    a list of ``(lineno, text)`` :attr:`items`.

    """
    def __init__(self, key, value, lineno, source, items=None):
        self.key = key
        self.value = value
        self.lineno = lineno
        self.source = source
        self.items = items

    def __repr__(self):
        if self.items is not None:
            return "<Entry %s: %u items>" % (self.key, len(self.items))
        return "<Entry %s: %r>" % (self.key, self.value)

    def error(self, msg, lineno=None):
        return SpecfileError(msg, lineno or self.lineno, self.source)

    def _scalar(self, conv, what):
        if self.items is not None:
            raise self.error("%s must be a value, not a section" % self.key)
        try:
            return conv(self.value)
        except ValueError:
            raise self.error("%s must be %s, got %r" % (self.key, what, self.value))

    def str(self):
        return self._scalar(str, "a value")

    def int(self):
        return self._scalar(int, "an integer")

    def float(self):
        return self._scalar(float, "a number")

    def ints(self):
        return self._scalar(lambda v: [int(x) for x in v.split()],
                            "a list of integers")


def parse(text, source=None):
    """
    Parse structured text into an ordered mapping of key to :class:`Entry`.

    :raises: SpecfileError

    """
    entries = OrderedDict()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line[0] in " \t":
            if section is None:
                raise SpecfileError("indented line outside a section", lineno, source)
            section.items.append((lineno, line.strip()))
            continue

        m = _line_re.match(line)
        if not m:
            raise SpecfileError("expected 'key: value', got %r" % line.strip(),
                                lineno, source)
        key, value = m.group(1), m.group(2)
        if key in entries:
            raise SpecfileError("duplicate key %r" % key, lineno, source)
        if value:
            entries[key] = Entry(key, value, lineno, source)
            section = None
        else:
            section = entries[key] = Entry(key, None, lineno, source, items=[])
    return entries


def parse_file(filename):
    with open(filename, encoding="utf-8") as f:
        return parse(f.read(), source=filename)


def dump(pairs):
    """
    Render an iterable of ``(key, value)`` pairs as canonical structured
    text. A list value becomes a section with one item per element.

    >>> print(dump([("name", "tiny"), ("layers", ["a", "b"])]), end="")
    name: tiny
    layers:
        a
        b

    """
    out = []
    for key, value in pairs:
        if isinstance(value, (list, tuple)):
            out.append("%s:" % key)
            out.extend("    %s" % item for item in value)
        else:
            out.append("%s: %s" % (key, value))
    return "\n".join(out) + "\n"
