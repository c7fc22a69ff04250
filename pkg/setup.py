"""
Installation file for python noetherrazor module
"""
import os
from pathlib import Path

from setuptools import setup

package_name = 'noetherrazor'
readme_file = Path(__file__).parent / 'README.rst'

setup(
    name=package_name,
    packages=[package_name],
    description='Hamiltonian neural networks that learn their conserved quantities',
    long_description=readme_file.read_text(),
    long_description_content_type='text/x-rst',
    license='MIT',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Physics',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'License :: OSI Approved :: MIT License',
        'Operating System :: Microsoft :: Windows',
        'Operating System :: POSIX',
        'Operating System :: MacOS',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    keywords='hamiltonian symmetry conserved-quantities variational-inference numpy',
    python_requires='>=3.8',
    setup_requires=["setuptools>=45", "setuptools_scm>=6.2"],
    use_scm_version={
        "write_to": "noetherrazor/_version.py",
        "version_scheme": "release-branch-semver",
    },
    install_requires=[
        'numpy>=1.21',
        'scooby>=0.5.1',
        'toml>=0.10',
    ],
    extras_require={
        'vtk': ['pyvista>=0.32.0'],
    },
    entry_points={
        'console_scripts': ['noetherrazor=noetherrazor.cli:main'],
    },
    package_data={'noetherrazor': [
        os.path.join('data', 'presets', '*.toml'),
    ]}

)
