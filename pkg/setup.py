#!/usr/bin/env python3
"""
ControlSR Setup Script
"""

from setuptools import setup, find_packages

# Read the README file
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

# Read requirements
with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

version = "0.1.0"

setup(
    name="controlsr",
    version=version,
    author="ControlSR Contributors",
    author_email="",
    description="Desk-scale diffusion super-resolution with LR-guided control branches",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["src", "src.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Image Processing",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.9",
    install_requires=[r for r in requirements if not r.startswith(("pytest", "mypy", "matplotlib"))],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "mypy>=1.0.0",
        ],
        "plots": [
            "matplotlib>=3.5.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "controlsr=src.interface.cli:main",
        ],
    },
    zip_safe=False,
)
