import codecs
import os
import re

from setuptools import find_packages, setup


def read(*parts):
    filename = os.path.join(os.path.dirname(__file__), *parts)
    with codecs.open(filename, encoding='utf-8') as fp:
        return fp.read()


def find_version(*file_paths):
    version_file = read(*file_paths)
    version_match = re.search(r"^__version__ = ['\"]([^'\"]*)['\"]",
                              version_file, re.M)
    if version_match:
        return version_match.group(1)
    raise RuntimeError("Unable to find version string.")


setup(
    name="lungtrack",
    version=find_version("lungtrack", "__init__.py"),
    license='BSD',
    description="Longitudinal lung CT segmentation and consolidation progression",
    long_description=read('README.rst'),
    packages=find_packages(exclude=['tests', 'tests.*']),
    python_requires='>=3.8',
    install_requires=[
        'django>=3.2',
        'numpy>=1.21',
        'scipy>=1.7',
        'SimpleITK>=2.1',
        'nibabel>=3.2',
        'torch>=1.13',
        'PyYAML>=5.4',
        'matplotlib>=3.4',
    ],
    entry_points={
        'console_scripts': [
            'lungtrack = lungtrack.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
        'Topic :: Scientific/Engineering :: Image Processing',
    ],
    zip_safe=False,
)
