from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="spcoslam",
    version="0.1.0",
    author="DDDDaren",
    description="Online learning of spatial concepts and a lexicon on top of grid-based FastSLAM",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Programming Language :: Python :: 3.10",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    install_requires=[
        # These should match what's in pyproject.toml
        "numpy>=1.26",
        "scipy>=1.11",
        "pandas>=2.1",
        "opencv-python-headless>=4.8",
        "scikit-learn>=1.3",
    ],
    entry_points={
        'console_scripts': [
            'spcoslam=spcoslam.spcoslam_cli:main',
        ],
    },
)
