#!/usr/bin/env python

"""The setup script."""

from setuptools import setup, find_packages
from molfusion import __version__, __author__, __email__

with open("README.md", encoding="utf-8") as readme_file:
    readme = readme_file.read()

with open("HISTORY.rst") as history_file:
    history = history_file.read()

requirements = [
    'torch>=2.0',
    'numpy>=1.22',
    'pandas>=1.4',
    'scikit-learn>=1.1',
    'scipy>=1.8',
    'networkx>=2.8',
    'matplotlib>=3.5',
]

setup_requirements = [ ]

test_requirements = [ ]

setup(
    author=__author__,
    author_email=__email__,
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: GNU General Public License v3 (GPLv3)',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Chemistry',
    ],
    description="Multi-view molecular representation learning with contrastive pretraining and attentive view fusion.",
    entry_points={
        'console_scripts': [
            'molfusion=molfusion.cli:main',
        ],
    },
    install_requires=requirements,
    license="GNU General Public License v3",
    long_description=readme + '\n\n' + history,
    long_description_content_type="text/markdown",
    include_package_data=True,
    keywords='molfusion',
    name='molfusion',
    packages=find_packages(include=['molfusion', 'molfusion.*']),
    setup_requires=setup_requirements,
    test_suite='tests',
    tests_require=test_requirements,
    url='https://github.com/molfusion/molfusion',
    version=__version__,
    zip_safe=False,
)
