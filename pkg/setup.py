from setuptools import setup, find_packages

setup(
    name='viti',
    version='0.1.0',
    author='',
    author_email='',
    packages=find_packages(include=['viti', 'viti.data', 'viti.utils', 'viti.utils.*']),
    install_requires=[
      "pandas",
      "pytest",
      "scipy",
      "matplotlib",
      "numpy",
      "importlib_resources",
      "cycler",
      "torch",
      "einops",
      "safetensors",
      "Pillow",
      "PyYAML",
      "tqdm"
    ],
    include_package_data=True,
    package_data={'': ['data/*.yaml']},
    entry_points={'console_scripts': ['viti=viti.cli:main']}
)
