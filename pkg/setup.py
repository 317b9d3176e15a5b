#!/usr/bin/env python3

from setuptools import setup
from io import open

with open('README.txt') as file:
    long_description = file.read()

setup(name='python-spad',
      version='0.1.0',
      description='Structured pruning adapters for Python 3',
      long_description = long_description,
      packages=['spad'],
      package_data={'spad': ['manifests/*.manifest']},
      scripts=['scripts/spad'],
      install_requires=['numpy>=1.20'],
      extras_require={'vis': ['svgwrite']},
      classifiers=["Development Status :: 3 - Alpha",
                   "Intended Audience :: Science/Research",
                   "License :: OSI Approved :: "
                   "GNU Lesser General Public License v3 or later (LGPLv3+)",
                   "Operating System :: OS Independent",
                   "Programming Language :: Python :: 3",
                   "Topic :: Scientific/Engineering :: Artificial Intelligence"],
      tests_require=['pytest', 'coverage'],
      )
