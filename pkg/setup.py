import setuptools
import unittest


def get_test_suite():
    test_loader = unittest.TestLoader()
    test_suite = test_loader.discover('test', pattern='*_test.py')
    return test_suite


with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name='nearmiss',
    version='0.1.0',
    description="Near-miss detection and hierarchical extreme value crash-risk estimation for road corridors.",
    long_description=long_description,
    test_suite="setup.get_test_suite",
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=("test",)),
    license="MIT",
    python_requires=">=3.8",
    install_requires=[
        "json-logging>=1.3",
        "numpy",
        "scipy",
        "pandas",
        "shapely>=2.0",
        "matplotlib"
    ],
    entry_points={
        "console_scripts": [
            "nearmiss=nearmiss.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
