#!/usr/bin/env python
from setuptools import setup
import glob

scripts = glob.glob("*.py")
scripts.remove("setup.py")

setup(
    name='CCM3D',
    version='v1.0',
    description='Simulate, train and benchmark neural-network reconstruction for 3D computational cannula microscopy.',
    packages=['ccm_utilities'],
    package_dir={'ccm_utilities': 'ccm_utilities/'},
    install_requires=[
              'intervaltree',
              'numpy',
              'scipy',
          ],
    extras_require={
              'test': ['pytest'],
          },
    scripts=scripts,
    zip_safe=True
)
