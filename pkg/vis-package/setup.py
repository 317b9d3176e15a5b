#!/usr/bin/env python3

from setuptools import setup

setup(name='visspad',
      version='0.1.0',
      description='Learned-fraction curve plots for python-spad',
      packages=['visspad'],
      install_requires=['svgwrite'],
      requires='spad',
      classifiers=["Development Status :: 3 - Alpha",
                   "Intended Audience :: Science/Research",
                   "License :: OSI Approved :: "
                   "GNU Lesser General Public License v3 or later (LGPLv3+)",
                   "Operating System :: OS Independent",
                   "Programming Language :: Python :: 3",
                   "Topic :: Scientific/Engineering :: Artificial Intelligence"]
      )
