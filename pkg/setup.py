#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""The setup script."""

from setuptools import setup, find_packages

with open('README.rst') as readme_file:
    readme = readme_file.read()

with open('HISTORY.rst') as history_file:
    history = history_file.read()

requirements = [
    "Click>=7.0",
    "nipype>=1.2.2",
    "numpy>=1.20",
    "scipy>=1.6",
    "Pillow>=8.0",
    "PyMCubes>=0.1.2",
    "trimesh>=3.9",
]

setup_requirements = [ ]

test_requirements = [ ]

setup(
    author="Salim Mansour",
    author_email='Salim.Mansour@camh.ca',
    classifiers=[
        'Development Status :: 2 - Pre-Alpha',
        'Intended Audience :: Developers',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
    ],
    description="Depth-prior radiance field reconstruction of RGB-D panoramas",
    entry_points={
        'console_scripts': [
            'panofield=panofield.cli:main',
        ],
    },
    install_requires=requirements,
    python_requires='>=3.8',
    license="MIT license",
    long_description=readme + '\n\n' + history,
    include_package_data=True,
    keywords='panofield',
    name='panofield',
    packages=find_packages(include=['panofield*']),
    setup_requires=setup_requirements,
    test_suite='tests',
    tests_require=test_requirements,
    url='https://github.com/TIGRLab/panofield',
    version='0.1.0',
    zip_safe=False,
)
