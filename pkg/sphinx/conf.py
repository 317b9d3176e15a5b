# -*- coding: utf-8 -*-
#
# python-spad documentation build configuration file.

import os
import sys

sys.path.insert(0, os.path.abspath('..'))

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.doctest',
              'sphinx.ext.intersphinx', 'sphinx.ext.viewcode']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'python-spad'
copyright = '2026, the python-spad developers'

# The short X.Y version.
version = '0.1'
# The full version, including alpha/beta/rc tags.
release = '0.1.0'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'haiku'
html_static_path = ['_static']
htmlhelp_basename = 'python-spaddoc'

latex_documents = [
  ('index', 'python-spad.tex', 'python-spad Documentation',
   'the python-spad developers', 'manual'),
]

man_pages = [
    ('index', 'python-spad', 'python-spad Documentation',
     ['the python-spad developers'], 1)
]

intersphinx_mapping = {'python': ('https://docs.python.org/3', None),
                       'numpy': ('https://numpy.org/doc/stable', None)}
