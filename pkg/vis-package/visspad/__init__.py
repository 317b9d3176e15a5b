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

# This file is not part of the main spad distribution;
# it draws learned-fraction curves for `spad curve --svg`.

import svgwrite

COLORS = {"finetune": "#d62728", "lora": "#1f77b4", "splora": "#2ca02c"}

MARGIN = 48


def scale_point(x, y, size, ymax):
    w, h = size
    return (MARGIN + x * (w - 2 * MARGIN),
            h - MARGIN - (y / ymax) * (h - 2 * MARGIN))


def curves(points):
    out = {}
    for p in points:
        out.setdefault(p.method, []).append((p.density, p.learned_fraction))
    for line in out.values():
        line.sort()
    return out


def render_curve(points, filename, size=(480, 320), title=None):
    lines = curves(points)
    ymax = max(y for line in lines.values() for _, y in line) * 1.05
    dwg = svgwrite.Drawing(filename, size=size)
    w, h = size

    axes = dwg.g(stroke="black", fill="none")
    axes.add(dwg.line(scale_point(0, 0, size, ymax), scale_point(1, 0, size, ymax)))
    axes.add(dwg.line(scale_point(0, 0, size, ymax), scale_point(0, ymax, size, ymax)))
    dwg.add(axes)
    dwg.add(dwg.text("weight density", (w / 2, h - 12),
                     style="text-anchor: middle; font-size: 12px"))
    dwg.add(dwg.text("learned fraction", (14, h / 2),
                     transform="rotate(-90 14 %g)" % (h / 2),
                     style="text-anchor: middle; font-size: 12px"))
    if title:
        dwg.add(dwg.text(title, (w / 2, 20),
                         style="text-anchor: middle; font-size: 14px"))

    for i, (method, line) in enumerate(sorted(lines.items())):
        color = COLORS.get(method, "black")
        dwg.add(dwg.polyline([scale_point(x, y, size, ymax) for x, y in line],
                             stroke=color, fill="none", stroke_width=2))
        dwg.add(dwg.text(method, (w - MARGIN - 60, MARGIN + 16 * i),
                         fill=color, style="font-size: 12px"))
    dwg.save()
    return dwg
