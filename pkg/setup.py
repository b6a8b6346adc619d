import setuptools

setuptools.setup(
    name="bagSOI",
    version="0.1.0",
    description="Dual-arm bag rim estimation, SOI generation, planning and tracking on a simulated bag",
    packages=setuptools.find_packages(exclude=("tests",)),
    package_data={"bagSOI": ["scenarios/*.json"]},
    python_requires=">=3.8",
    install_requires=[
        "torch>=2.1.0",
        "transformers==4.36.1",
        "numpy==1.24.4",
        "tqdm==4.66.1",
        "scipy>=1.10",
        "matplotlib>=3.7",
    ],
    extras_require={"test": ["pytest>=7"]},
    entry_points={"console_scripts": ["bagsoi=bagSOI.cli:main"]},
)
