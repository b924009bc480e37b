from setuptools import setup, find_packages

setup(
    name="scene_perception",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    include_package_data=True,
    install_requires=[
        'numpy>=1.24.0',
        'pandas>=2.0.0',
        'pytest>=7.4.0',
        'scipy>=1.10.0',
    ],
    description="Street-scene perception ranking from scene graphs with a masked graph autoencoder",
    long_description=open('README.md').read(),
    long_description_content_type="text/markdown",
    entry_points={
        "console_scripts": [
            "scene-perception=src.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',
)
