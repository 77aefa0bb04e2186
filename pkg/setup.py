from setuptools import setup, find_packages
from pathlib import Path

# Read README for long description
this_directory = Path(__file__).parent
long_description = ""
readme_file = this_directory / "README.md"
if readme_file.exists():
    long_description = readme_file.read_text(encoding="utf-8")

setup(
    name="spmatch",
    version="1.0.0",
    description="Superpatch matching and exemplar-based labeling from the command line",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["spmatch", "spmatch.*"]),
    include_package_data=True,
    python_requires=">=3.10",
    install_requires=[
        "click>=8.1.0",
        "pydantic>=2.5.0",
        "numpy>=1.24",
        "scipy>=1.10",
        "Pillow>=10.0",
        "PyMaxflow>=1.3.0",
        "scikit-learn>=1.3",
        "scikit-image>=0.21",
    ],
    entry_points={
        "console_scripts": [
            "spmatch=spmatch.app.cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    keywords="superpixels patchmatch nearest-neighbor segmentation label-fusion cli",
)
